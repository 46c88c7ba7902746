#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace omicsmap {

enum class ErrorKind {
    // hierarchy
    NetworkUnavailable,
    CacheCorrupt,
    MalformedLine,
    OrphanLine,
    MissingSubFile,
    // expr
    ParseError,
    DuplicateSample,
    EmptyMatrix,
    DegenerateLibrary,
    UnknownCategory,
    // treemap
    NonPositiveWeight,
    EmptyTree,
    // render
    MissingValue,
    OutOfRange,
    NotDivisible,
    // cnn
    ShapeMismatch,
    TraceMismatch,
    EmptyTrainingSet,
    VersionMismatch,
    ChecksumMismatch,
    // attribution
    InconsistentSides,
    // eval
    ClassTooSmall,
    OneClassOnly,
    NonFiniteFeature,
    SelectionNotInBackground,
    // shared
    IoError,
    UsageError,
};

inline std::string_view to_string(ErrorKind k) {
    switch (k) {
    case ErrorKind::NetworkUnavailable: return "NetworkUnavailable";
    case ErrorKind::CacheCorrupt: return "CacheCorrupt";
    case ErrorKind::MalformedLine: return "MalformedLine";
    case ErrorKind::OrphanLine: return "OrphanLine";
    case ErrorKind::MissingSubFile: return "MissingSubFile";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::DuplicateSample: return "DuplicateSample";
    case ErrorKind::EmptyMatrix: return "EmptyMatrix";
    case ErrorKind::DegenerateLibrary: return "DegenerateLibrary";
    case ErrorKind::UnknownCategory: return "UnknownCategory";
    case ErrorKind::NonPositiveWeight: return "NonPositiveWeight";
    case ErrorKind::EmptyTree: return "EmptyTree";
    case ErrorKind::MissingValue: return "MissingValue";
    case ErrorKind::OutOfRange: return "OutOfRange";
    case ErrorKind::NotDivisible: return "NotDivisible";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::TraceMismatch: return "TraceMismatch";
    case ErrorKind::EmptyTrainingSet: return "EmptyTrainingSet";
    case ErrorKind::VersionMismatch: return "VersionMismatch";
    case ErrorKind::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorKind::InconsistentSides: return "InconsistentSides";
    case ErrorKind::ClassTooSmall: return "ClassTooSmall";
    case ErrorKind::OneClassOnly: return "OneClassOnly";
    case ErrorKind::NonFiniteFeature: return "NonFiniteFeature";
    case ErrorKind::SelectionNotInBackground: return "SelectionNotInBackground";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::UsageError: return "UsageError";
    }
    return "Unknown";
}

/// Every failure raised by the library carries one of the kinds above.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
    throw Error(kind, what);
}

} // namespace omicsmap
