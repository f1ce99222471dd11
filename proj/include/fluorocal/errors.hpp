#pragma once

#include <stdexcept>
#include <string>

namespace fluorocal {

/// Base class for all library errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// geometry
struct PointBehindCamera : Error {
  explicit PointBehindCamera(const std::string& msg) : Error(msg) {}
};
struct DegenerateRays : Error {
  explicit DegenerateRays(const std::string& msg) : Error(msg) {}
};
struct DegenerateConfiguration : Error {
  explicit DegenerateConfiguration(const std::string& msg) : Error(msg) {}
};

// estimation
struct SingularNormalMatrix : Error {
  explicit SingularNormalMatrix(const std::string& msg) : Error(msg) {}
};
struct AllOutliers : Error {
  explicit AllOutliers(const std::string& msg) : Error(msg) {}
};

// network assembly
struct InsufficientObservations : Error {
  explicit InsufficientObservations(const std::string& msg) : Error(msg) {}
};
struct MissingPair : Error {
  explicit MissingPair(const std::string& msg) : Error(msg) {}
};

// distortion learning
struct EmptyTrainingSet : Error {
  explicit EmptyTrainingSet(const std::string& msg) : Error(msg) {}
};
struct KOutOfRange : Error {
  explicit KOutOfRange(const std::string& msg) : Error(msg) {}
};
struct TooFewSamples : Error {
  explicit TooFewSamples(const std::string& msg) : Error(msg) {}
};
struct DegenerateGrid : Error {
  explicit DegenerateGrid(const std::string& msg) : Error(msg) {}
};

// generator
struct InvalidSpec : Error {
  explicit InvalidSpec(const std::string& msg) : Error(msg) {}
};

// evaluation
struct NoCommonTargets : Error {
  explicit NoCommonTargets(const std::string& msg) : Error(msg) {}
};
struct NonPositiveBaseline : Error {
  explicit NonPositiveBaseline(const std::string& msg) : Error(msg) {}
};

// io
struct DuplicateKey : Error {
  explicit DuplicateKey(const std::string& msg) : Error(msg) {}
};
struct MalformedRow : Error {
  explicit MalformedRow(const std::string& msg) : Error(msg) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};
struct VersionMismatch : Error {
  explicit VersionMismatch(const std::string& msg) : Error(msg) {}
};

}  // namespace fluorocal
