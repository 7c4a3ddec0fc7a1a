#pragma once

#include <stdexcept>
#include <string>

namespace loopmon {

// Malformed on-disk data: manifests, images, checkpoints, config files.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

// Training produced a non-finite loss; carries the batch diagnostic.
class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(const std::string& what)
      : std::runtime_error(what) {}
};

}  // namespace loopmon
