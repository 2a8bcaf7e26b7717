#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>

#include <json.hpp>

#include "neuralfactors/embedder.hpp"

// On-disk model state: a 4-byte little-endian header length, a JSON header
// carrying the config, the normalization constant and a name -> (offset,
// shape) tensor index, then one f64 blob holding final and Polyak weights.
namespace nf::ckpt {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written in native little-endian order");

inline constexpr int kFormatVersion = 1;

struct Checkpoint {
  model::ModelConfig config;
  model::Weights weights;  // final iterate
  model::Weights polyak;   // deployed averaged weights
  double norm_constant = 1.0;
};

inline const char* arch_name(model::Arch a) {
  return a == model::Arch::attention ? "attention" : "recurrent";
}

inline model::Arch arch_from_name(const std::string& s) {
  if (s == "attention") return model::Arch::attention;
  if (s == "recurrent") return model::Arch::recurrent;
  throw ContractError("unknown arch '" + s + "'");
}

inline nlohmann::json config_to_json(const model::ModelConfig& c) {
  return nlohmann::json{{"f", c.f},
                        {"lookback", c.lookback},
                        {"hidden", c.hidden},
                        {"dropout", c.dropout},
                        {"arch", arch_name(c.arch)},
                        {"seq_layers", c.seq_layers},
                        {"heads", c.heads},
                        {"k_iwae", c.k_iwae},
                        {"lr", c.lr},
                        {"weight_decay", c.weight_decay},
                        {"steps", c.steps},
                        {"polyak_start", c.polyak_start},
                        {"val_every", c.val_every},
                        {"seed", c.seed},
                        {"matched", c.matched},
                        {"channels", c.channels},
                        {"d_static", c.d_static}};
}

inline model::ModelConfig config_from_json(const nlohmann::json& j) {
  model::ModelConfig c;
  c.f = j.at("f").get<std::size_t>();
  c.lookback = j.at("lookback").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.arch = arch_from_name(j.at("arch").get<std::string>());
  c.seq_layers = j.at("seq_layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.k_iwae = j.at("k_iwae").get<std::size_t>();
  c.lr = j.at("lr").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.steps = j.at("steps").get<std::size_t>();
  c.polyak_start = j.at("polyak_start").get<std::size_t>();
  c.val_every = j.at("val_every").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.matched = j.at("matched").get<bool>();
  c.channels = j.at("channels").get<std::size_t>();
  c.d_static = j.at("d_static").get<std::size_t>();
  return c;
}

namespace detail {

inline void index_weights(nlohmann::json& tensors, const model::Weights& w,
                          const std::string& prefix, std::size_t& offset) {
  for (std::size_t i = 0; i < w.count(); ++i) {
    const Tensor& v = w.values[i];
    tensors[prefix + w.names[i]] = {{"offset", offset}, {"shape", v.shape()}};
    offset += v.numel();
  }
}

inline void append_blob(std::ofstream& out, const model::Weights& w) {
  for (const Tensor& v : w.values)
    out.write(reinterpret_cast<const char*>(v.data().data()),
              static_cast<std::streamsize>(v.numel() * sizeof(double)));
}

inline void fill_weights(model::Weights& w, const std::string& prefix,
                         const nlohmann::json& tensors, const std::vector<double>& blob,
                         const std::string& path) {
  for (std::size_t i = 0; i < w.count(); ++i) {
    const std::string key = prefix + w.names[i];
    require(tensors.contains(key), path + ": missing tensor " + key);
    const auto& entry = tensors.at(key);
    const Shape shape = entry.at("shape").get<Shape>();
    require(shape == w.values[i].shape(), path + ": shape mismatch for " + key);
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    const std::size_t n = w.values[i].numel();
    require(offset + n <= blob.size(), path + ": tensor " + key + " overruns the blob");
    std::copy(blob.begin() + static_cast<std::ptrdiff_t>(offset),
              blob.begin() + static_cast<std::ptrdiff_t>(offset + n),
              w.values[i].data().begin());
  }
}

}  // namespace detail

inline void save(const Checkpoint& c, const std::string& path) {
  require(c.weights.count() == c.polyak.count(), "checkpoint weight sets disagree");
  nlohmann::json tensors = nlohmann::json::object();
  std::size_t offset = 0;
  detail::index_weights(tensors, c.weights, "", offset);
  detail::index_weights(tensors, c.polyak, "polyak.", offset);
  nlohmann::json header{{"version", kFormatVersion},
                        {"config", config_to_json(c.config)},
                        {"norm_constant", c.norm_constant},
                        {"tensors", tensors}};
  const std::string head = header.dump();
  require(head.size() <= 0xffffffffu, "checkpoint header too large");

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path);
  const std::uint32_t len = static_cast<std::uint32_t>(head.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  detail::append_blob(out, c.weights);
  detail::append_blob(out, c.polyak);
  if (!out) throw DataError("short write on checkpoint " + path);
}

inline Checkpoint load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path);
  std::uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in) throw DataError(path + ": truncated header length");
  std::string head(len, '\0');
  in.read(head.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError(path + ": truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(head);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": bad checkpoint header: " + e.what());
  }
  const int version = header.at("version").get<int>();
  require(version == kFormatVersion,
          path + ": unsupported checkpoint version " + std::to_string(version));

  Checkpoint c;
  c.config = config_from_json(header.at("config"));
  c.norm_constant = header.at("norm_constant").get<double>();
  c.weights = model::init_weights(c.config);
  c.polyak = model::init_weights(c.config);

  std::vector<double> blob(2 * c.weights.scalar_count());
  in.read(reinterpret_cast<char*>(blob.data()),
          static_cast<std::streamsize>(blob.size() * sizeof(double)));
  if (!in) throw DataError(path + ": truncated weight blob");

  const nlohmann::json& tensors = header.at("tensors");
  detail::fill_weights(c.weights, "", tensors, blob, path);
  detail::fill_weights(c.polyak, "polyak.", tensors, blob, path);
  for (const Tensor& v : c.weights.values) v.check_finite("checkpoint weight");
  for (const Tensor& v : c.polyak.values) v.check_finite("checkpoint weight");
  return c;
}

}  // namespace nf::ckpt
