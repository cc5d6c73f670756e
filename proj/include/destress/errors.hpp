#ifndef DESTRESS_ERRORS_HPP
#define DESTRESS_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace destress {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NotConnected : Error {
  using Error::Error;
};

struct BadDimensions : Error {
  using Error::Error;
};

struct NotStochastic : Error {
  using Error::Error;
};

struct NotSymmetric : Error {
  using Error::Error;
};

struct DimensionMismatch : Error {
  using Error::Error;
};

struct EmptyShard : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

struct ParseError : Error {
  ParseError(const std::string& msg, long line_no)
      : Error(msg + " (line " + std::to_string(line_no) + ")"), line(line_no) {}
  long line;
};

struct RaggedRow : Error {
  RaggedRow(const std::string& msg, long line_no)
      : Error(msg + " (line " + std::to_string(line_no) + ")"), line(line_no) {}
  long line;
};

struct TooFewSamples : Error {
  using Error::Error;
};

struct BadAlpha : Error {
  using Error::Error;
};

struct ShardMismatch : Error {
  using Error::Error;
};

// Raised when an optimizer state entry becomes NaN/Inf; carries the loop
// position at which divergence was detected (inner_s == 0 for outer updates).
struct NonFinite : Error {
  NonFinite(long t, long s)
      : Error("non-finite state at outer step " + std::to_string(t) +
              ", inner step " + std::to_string(s)),
        outer_t(t),
        inner_s(s) {}
  long outer_t;
  long inner_s;
};

struct ConfigInvalid : Error {
  using Error::Error;
};

}  // namespace destress

#endif  // DESTRESS_ERRORS_HPP
