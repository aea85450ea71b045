#pragma once

#include <stdexcept>
#include <string>

namespace tgfuse {

// Error taxonomy shared across the toolkit. The CLI maps these onto exit
// codes: usage errors -> 1, data/format errors -> 2, numeric faults -> 3.

class ContractViolation : public std::logic_error {
public:
    explicit ContractViolation(const std::string& msg) : std::logic_error(msg) {}
};

class NotFoundError : public std::runtime_error {
public:
    explicit NotFoundError(const std::string& msg) : std::runtime_error(msg) {}
};

class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericFault : public std::runtime_error {
public:
    explicit NumericFault(const std::string& msg) : std::runtime_error(msg) {}
};

class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when a remote service stage fails after retries; carries the stage name.
class PipelineError : public std::runtime_error {
public:
    PipelineError(const std::string& stage, const std::string& msg)
        : std::runtime_error("stage '" + stage + "': " + msg), stage_(stage) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

class UnsupportedTaskError : public std::runtime_error {
public:
    explicit UnsupportedTaskError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ContractViolation(msg);
}

}  // namespace tgfuse
