#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace capscope {

enum class ErrorKind {
  validation,
  not_found,
  conflict,
  parse,
  io,
  data,
  adapter,
};

std::string_view to_string(ErrorKind kind) noexcept;

/// Base of every error raised by the library. The kind drives CLI exit codes
/// and HTTP status mapping in the service layer.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define CAPSCOPE_DEFINE_ERROR(Name, Kind)                        \
  class Name : public Error {                                    \
   public:                                                       \
    explicit Name(const std::string& what) : Error(Kind, what) {} \
  };

CAPSCOPE_DEFINE_ERROR(ValidationError, ErrorKind::validation)
CAPSCOPE_DEFINE_ERROR(NotFoundError, ErrorKind::not_found)
CAPSCOPE_DEFINE_ERROR(ConflictError, ErrorKind::conflict)
CAPSCOPE_DEFINE_ERROR(ParseError, ErrorKind::parse)
CAPSCOPE_DEFINE_ERROR(IoError, ErrorKind::io)
CAPSCOPE_DEFINE_ERROR(DataError, ErrorKind::data)
CAPSCOPE_DEFINE_ERROR(AdapterError, ErrorKind::adapter)

#undef CAPSCOPE_DEFINE_ERROR

}  // namespace capscope
