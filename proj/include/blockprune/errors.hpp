#pragma once

#include <stdexcept>
#include <string>

namespace blockprune {

// Dimension / geometry violations (matmul inner extents, block divisibility, ...).
struct ShapeError : std::invalid_argument {
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

// Out-of-range lookups (token ids, class labels).
struct IndexError : std::out_of_range {
  explicit IndexError(const std::string& what) : std::out_of_range(what) {}
};

// API contract violations (non-scalar loss, reused tape, unknown method).
struct ContractError : std::logic_error {
  explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

// Failures during a run (divergence, bad files, non-finite values in checked mode).
struct RunError : std::runtime_error {
  explicit RunError(const std::string& what) : std::runtime_error(what) {}
};

// Masked model and compacted model disagree beyond tolerance.
struct EquivalenceError : std::runtime_error {
  explicit EquivalenceError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace blockprune
