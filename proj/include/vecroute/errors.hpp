#pragma once

#include <stdexcept>
#include <string>

namespace vecroute {

// Error classes map 1:1 onto CLI exit codes (see README).
enum class ErrorCode : int {
  internal = 1,
  usage = 2,
  config = 3,
  validation = 4,
  not_found = 5,
  shortfall = 6,
  transport = 7,
  length = 8,
  staleness = 9,
  divergence = 10,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& m) : Error(ErrorCode::config, m) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error(ErrorCode::config, m) {}
};
struct ValidationError : Error {
  explicit ValidationError(const std::string& m) : Error(ErrorCode::validation, m) {}
};
struct IndexError : Error {
  explicit IndexError(const std::string& m) : Error(ErrorCode::validation, m) {}
};
struct NotFoundError : Error {
  explicit NotFoundError(const std::string& m) : Error(ErrorCode::not_found, m) {}
};
struct ShortfallError : Error {
  explicit ShortfallError(const std::string& m) : Error(ErrorCode::shortfall, m) {}
};
struct TransportError : Error {
  explicit TransportError(const std::string& m) : Error(ErrorCode::transport, m) {}
};
struct LengthError : Error {
  explicit LengthError(const std::string& m) : Error(ErrorCode::length, m) {}
};
struct StalenessError : Error {
  explicit StalenessError(const std::string& m) : Error(ErrorCode::staleness, m) {}
};
struct DivergenceError : Error {
  explicit DivergenceError(const std::string& m) : Error(ErrorCode::divergence, m) {}
};

}  // namespace vecroute
