#pragma once

#include <stdexcept>
#include <string>

namespace fleetlens {

// Base of every error the library throws. kind() is the stable name used in
// error annotations (prediction rows, CLI output, HTTP bodies).
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

  // Retriable errors may succeed on a later attempt against the same backend.
  virtual bool retriable() const noexcept { return false; }

 private:
  std::string kind_;
};

#define FLEETLENS_DEFINE_ERROR(Name)                               \
  class Name : public Error {                                      \
   public:                                                         \
    explicit Name(const std::string& what) : Error(#Name, what) {} \
  };

FLEETLENS_DEFINE_ERROR(InvalidArgument)
FLEETLENS_DEFINE_ERROR(InvariantViolation)
FLEETLENS_DEFINE_ERROR(UnknownLabel)
FLEETLENS_DEFINE_ERROR(DuplicateRecordId)
FLEETLENS_DEFINE_ERROR(EmptyInput)
FLEETLENS_DEFINE_ERROR(DegenerateSplit)
FLEETLENS_DEFINE_ERROR(EmptyPartition)
FLEETLENS_DEFINE_ERROR(IoError)
FLEETLENS_DEFINE_ERROR(ProtocolError)
FLEETLENS_DEFINE_ERROR(MixedGroup)
FLEETLENS_DEFINE_ERROR(MissingTruth)
FLEETLENS_DEFINE_ERROR(DuplicateTally)
FLEETLENS_DEFINE_ERROR(StoreCorrupt)
FLEETLENS_DEFINE_ERROR(InvalidQuery)
FLEETLENS_DEFINE_ERROR(NotFound)

#undef FLEETLENS_DEFINE_ERROR

class BackendUnavailable : public Error {
 public:
  explicit BackendUnavailable(const std::string& what)
      : Error("BackendUnavailable", what) {}
  bool retriable() const noexcept override { return true; }
};

class Timeout : public Error {
 public:
  explicit Timeout(const std::string& what) : Error("Timeout", what) {}
  bool retriable() const noexcept override { return true; }
};

// Parse failures carry the 1-based row (line) and the offending column name.
class ParseError : public Error {
 public:
  ParseError(std::size_t row, std::string column, const std::string& reason)
      : Error("ParseError", format(row, column, reason)),
        row_(row),
        column_(std::move(column)) {}

  std::size_t row() const noexcept { return row_; }
  const std::string& column() const noexcept { return column_; }

 private:
  static std::string format(std::size_t row, const std::string& column,
                            const std::string& reason) {
    std::string out = "row " + std::to_string(row);
    if (!column.empty()) out += ", column '" + column + "'";
    return out + ": " + reason;
  }

  std::size_t row_;
  std::string column_;
};

}  // namespace fleetlens
