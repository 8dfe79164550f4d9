#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace tame {

// Error taxonomy. The CLI maps these onto distinct exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct ValueError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};

namespace detail {
template <class... Args>
std::string cat(const Args&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}
}  // namespace detail

}  // namespace tame

#define TAME_CHECK(cond, ExcType, ...)                                \
    do {                                                              \
        if (!(cond)) throw ExcType(::tame::detail::cat(__VA_ARGS__)); \
    } while (0)

#define TAME_CHECK_SHAPE(cond, ...) TAME_CHECK(cond, ::tame::ShapeError, __VA_ARGS__)
#define TAME_CHECK_VALUE(cond, ...) TAME_CHECK(cond, ::tame::ValueError, __VA_ARGS__)
#define TAME_CHECK_CONFIG(cond, ...) TAME_CHECK(cond, ::tame::ConfigError, __VA_ARGS__)
#define TAME_CHECK_IO(cond, ...) TAME_CHECK(cond, ::tame::IoError, __VA_ARGS__)
