#pragma once

#include <stdexcept>
#include <string>

namespace tscan {

// All library errors derive from std::runtime_error so callers can catch
// broadly or by kind. Messages name the offending value, never just the rule.

// Tensor dimension mismatch (offending shapes are spelled out in the message).
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A precondition of an operation was violated (NaN input, wrong rank, ...).
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Schema is malformed or inconsistent with the data it is applied to.
struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A file could not be parsed; message carries row/column context.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Categorical value outside the declared cardinality under strict handling.
struct OovError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Treatment column unusable (all-constant, outside declared kind, ...).
struct DegenerateTreatmentError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// An operation was invoked on a model variant that does not support it.
struct VariantError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A metric has no defined value on the given data (e.g. one-armed sample).
struct MetricUndefinedError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Requested combination is recognized but intentionally not implemented.
struct UnsupportedError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem-level failure (missing file, unwritable path, short read).
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid or contradictory run configuration (CLI/JSON level).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A pipeline stage was invoked before the stage it depends on.
struct PipelineOrderError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Supplied artifacts (checkpoint/schema/dataset) do not fit together.
struct ArtifactMismatchError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace tscan
