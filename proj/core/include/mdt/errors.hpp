#pragma once

#include <stdexcept>
#include <string>

namespace mdt {

// Shape/extent disagreement between operands.
class DimensionError : public std::runtime_error {
public:
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Caller violated an operation's precondition.
class ContractError : public std::runtime_error {
public:
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// File does not start with the expected magic bytes.
class MagicError : public IoError {
public:
    explicit MagicError(const std::string& msg) : IoError(msg) {}
};

// File ends before the header/payload it promises.
class TruncationError : public IoError {
public:
    explicit TruncationError(const std::string& msg) : IoError(msg) {}
};

// Stored tensor shape disagrees with the receiving configuration.
class ShapeError : public IoError {
public:
    explicit ShapeError(const std::string& msg) : IoError(msg) {}
};

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mdt
