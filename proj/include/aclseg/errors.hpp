#pragma once

#include <stdexcept>
#include <string>

namespace aclseg {

// Every error raised by the library derives from Error so callers can catch
// broadly and still branch on the concrete category.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };
struct ContractError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct CorruptionError : Error { using Error::Error; };
struct VersionError : Error { using Error::Error; };
struct DegenerateIdealError : Error { using Error::Error; };
struct TrainingAborted : Error { using Error::Error; };
struct MissingPrerequisite : Error { using Error::Error; };

}  // namespace aclseg
