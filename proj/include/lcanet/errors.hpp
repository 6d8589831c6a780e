#pragma once

#include <stdexcept>
#include <string>

namespace lcanet {

/// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor dimension / width mismatches.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

/// Transcript characters outside the vocabulary.
struct VocabError : Error {
    explicit VocabError(const std::string& msg) : Error(msg) {}
};

/// Target cannot be aligned to the given number of frames.
struct FeasibilityError : Error {
    explicit FeasibilityError(const std::string& msg) : Error(msg) {}
};

/// Malformed files: VSEQ, checkpoints, manifests, config files.
struct FormatError : Error {
    explicit FormatError(const std::string& msg) : Error(msg) {}
};

/// Non-finite values where finite ones are required.
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

/// Filesystem failures.
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace lcanet
