#pragma once

#include <stdexcept>
#include <string>

namespace coarseem {

// Error classes map to CLI exit codes: config 2, I/O 3, format 4, check 5.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CheckError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace coarseem
