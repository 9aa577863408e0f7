#pragma once

#include <stdexcept>
#include <string>

namespace dpsurr {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Cholesky / LLT failure on a matrix that must be positive definite.
class DecompositionError : public Error {
 public:
  using Error::Error;
};

// Argument outside the support of a density or sampler.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Malformed or incomplete data (empty design cells, bad files, bad masks).
class DataError : public Error {
 public:
  using Error::Error;
};

// A trial design that cannot satisfy its own constraints.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

// A chain produced a non-finite state.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long iteration)
      : Error(what + " (iteration " + std::to_string(iteration) + ")"),
        iteration_(iteration) {}
  long iteration() const { return iteration_; }

 private:
  long iteration_;
};

}  // namespace dpsurr
