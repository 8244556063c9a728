#pragma once

#include <stdexcept>
#include <string>

namespace garnet {

// A precondition or shape contract was violated by the caller.
struct contract_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A file could not be opened, read or written.
struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A file exists but its bytes do not match the expected format.
struct format_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A computation produced non-finite values or otherwise diverged.
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace garnet
