#pragma once

/*
 * Exception types shared across the toolkit. The CLI maps these onto its
 * exit-code contract: usage and validation problems exit 2, numerical
 * failures exit 3.
 */

#include <cstddef>
#include <stdexcept>
#include <string>

namespace flowturbo {

// Argument outside its mathematical domain (time out of range, vanishing
// data coefficient, edit strength of zero, ...).
class DomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Structurally invalid input: mismatched shapes, ill-formed plans, missing
// model for a block that needs one.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Plan text that does not parse. Records where in the string it went wrong.
class PlanParseError : public std::invalid_argument {
 public:
  PlanParseError(const std::string& what, std::size_t byte_offset)
      : std::invalid_argument(what + " (byte " + std::to_string(byte_offset) + ")"),
        byte_offset_(byte_offset) {}

  std::size_t byte_offset() const { return byte_offset_; }

 private:
  std::size_t byte_offset_;
};

// File could not be read, written, or decoded.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss. Carries the step where it happened.
class TrainingDivergence : public std::runtime_error {
 public:
  TrainingDivergence(int step, double loss)
      : std::runtime_error("non-finite loss " + std::to_string(loss) +
                           " at step " + std::to_string(step)),
        step_(step) {}

  int step() const { return step_; }

 private:
  int step_;
};

}  // namespace flowturbo
