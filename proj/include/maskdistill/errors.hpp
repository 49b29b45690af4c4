#pragma once

#include <stdexcept>
#include <string>

namespace maskdistill {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad magic, unsupported version, malformed text record, RLE count mismatch.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Payload length disagrees with the header (truncated or padded file).
class CorruptionError : public Error {
public:
    using Error::Error;
};

/// Invariant violation on an in-memory value (non-finite data, shape mismatch).
class ValidationError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Caller-supplied parameter outside its allowed range.
class ParameterError : public Error {
public:
    using Error::Error;
};

class EmptyMaskError : public Error {
public:
    using Error::Error;
};

/// A record references something (embedding, image) that cannot be found.
class LookupError : public Error {
public:
    using Error::Error;
    LookupError(const std::string& what, std::string image_id) : Error(what), image_id_(std::move(image_id)) {}

    /// Image the failed lookup was for; empty when unknown.
    const std::string& image_id() const { return image_id_; }

private:
    std::string image_id_;
};

}  // namespace maskdistill
