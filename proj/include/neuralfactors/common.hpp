#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace nf {

// Thrown when a caller breaks a documented precondition (bad shape, bad range).
class ContractError : public std::invalid_argument {
 public:
  explicit ContractError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Ingestion problems: malformed CSV rows, duplicate keys, missing columns.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
  DataError(const std::string& msg, std::size_t row)
      : std::runtime_error(msg + " (row " + std::to_string(row) + ")"), row_(row) {}
  std::size_t row() const { return row_; }

 private:
  std::size_t row_ = 0;
};

// Runtime numerical failures: divergence, non-finite results.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// Factorization failure; carries the pivot that went non-positive.
class DecompositionError : public NumericalError {
 public:
  DecompositionError(const std::string& msg, std::size_t pivot)
      : NumericalError(msg + " at pivot " + std::to_string(pivot)), pivot_(pivot) {}
  std::size_t pivot() const { return pivot_; }

 private:
  std::size_t pivot_ = 0;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

inline void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericalError(std::string("non-finite value in ") + what);
}

}  // namespace nf
