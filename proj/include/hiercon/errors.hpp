#pragma once

#include <stdexcept>
#include <string>

namespace hiercon {

/// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// taxonomy
struct ConflictingParent : Error { using Error::Error; };
struct EmptyLabel : Error { using Error::Error; };
struct UnknownLabel : Error { using Error::Error; };

// data
struct ParseError : Error { using Error::Error; };
struct SplitLeakage : Error { using Error::Error; };
struct InvalidConfig : Error { using Error::Error; };
struct EmptySplit : Error { using Error::Error; };

// network
struct ShapeMismatch : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct VersionMismatch : Error { using Error::Error; };
struct CorruptCheckpoint : Error { using Error::Error; };

// losses
struct InvalidPair : Error { using Error::Error; };
struct NoPositives : Error { using Error::Error; };

// eval
struct EmptyReference : Error { using Error::Error; };
struct LengthMismatch : Error { using Error::Error; };
struct InsufficientExamples : Error { using Error::Error; };

// pipeline
struct UnknownPreset : Error { using Error::Error; };
struct GridTooLarge : Error { using Error::Error; };
struct DimensionMismatch : Error { using Error::Error; };

}  // namespace hiercon
