#pragma once

#include <stdexcept>
#include <string>

namespace scoregrad {

// Error categories map 1:1 onto CLI exit codes.
enum class ErrorKind { usage, data, numeric, io };

inline int exit_code(ErrorKind k) {
    switch (k) {
        case ErrorKind::usage: return 2;
        case ErrorKind::data: return 3;
        case ErrorKind::numeric: return 4;
        case ErrorKind::io: return 5;
    }
    return 1;
}

inline const char* kind_name(ErrorKind k) {
    switch (k) {
        case ErrorKind::usage: return "usage";
        case ErrorKind::data: return "data";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::io: return "io";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail_usage(const std::string& msg) { throw Error(ErrorKind::usage, msg); }
[[noreturn]] inline void fail_data(const std::string& msg) { throw Error(ErrorKind::data, msg); }
[[noreturn]] inline void fail_numeric(const std::string& msg) { throw Error(ErrorKind::numeric, msg); }
[[noreturn]] inline void fail_io(const std::string& msg) { throw Error(ErrorKind::io, msg); }

}  // namespace scoregrad
