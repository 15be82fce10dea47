#pragma once

#include <stdexcept>
#include <string>

namespace peftlab {

// Error taxonomy shared by all modules. The CLI maps these onto exit codes:
// usage/schema problems -> 1, data/state/budget problems -> 2, numeric -> 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes for an operation.
struct ShapeError : Error {
  using Error::Error;
};

// Invalid configuration (model dims, adapter ranks, generator params).
struct ConfigError : Error {
  using Error::Error;
};

// Malformed or out-of-range input data (token ids, labels, JSONL lines).
struct DataError : Error {
  using Error::Error;
};

// Operation applied in the wrong state (duplicate injection, double merge).
struct StateError : Error {
  using Error::Error;
};

// Non-finite values, NaN losses, failed numeric preconditions.
struct NumericError : Error {
  using Error::Error;
};

// API contract violations (non-scalar loss node, bad argument mix).
struct ContractError : Error {
  using Error::Error;
};

// Budget cannot be satisfied (few-shot class too small).
struct BudgetError : Error {
  using Error::Error;
};

// Degenerate efficiency cohort.
struct CohortError : Error {
  using Error::Error;
};

// Report/plot inputs missing required columns.
struct ReportError : Error {
  using Error::Error;
};

// Experiment spec fails schema validation.
struct SchemaError : Error {
  using Error::Error;
};

}  // namespace peftlab
