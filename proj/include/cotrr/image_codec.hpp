#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "cotrr/backend.hpp"

namespace cotrr {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ImageEncoding {
  int max_side = 512;
  int jpeg_quality = 85;
};

/// Decodes an image file, clamps its longest side and re-encodes it as JPEG.
/// The result is a pure function of the file bytes and `encoding`.
ImagePart load_image_for_transmission(const std::filesystem::path& path, const ImageEncoding& encoding = {});

/// Same as above for an in-memory encoded image (PNG, JPEG, ...).
ImagePart reencode_image(const std::string& encoded, const ImageEncoding& encoding = {});

/// Maps image ids to files: `pattern` may contain `{id}`; the result is relative to `root`.
class ImageResolver {
 public:
  ImageResolver() = default;
  ImageResolver(std::filesystem::path root, std::string pattern = "{id}");

  std::filesystem::path path_for(const std::string& id) const;
  const std::filesystem::path& root() const noexcept { return root_; }
  const std::string& pattern() const noexcept { return pattern_; }

 private:
  std::filesystem::path root_;
  std::string pattern_ = "{id}";
};

}  // namespace cotrr
