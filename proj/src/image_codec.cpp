#include "cotrr/image_codec.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <vector>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace cotrr {

ImagePart reencode_image(const std::string& encoded, const ImageEncoding& encoding) {
  if (encoded.empty()) throw ImageError("empty image data");
  const cv::Mat raw(1, static_cast<int>(encoded.size()), CV_8UC1, const_cast<char*>(encoded.data()));
  cv::Mat img = cv::imdecode(raw, cv::IMREAD_COLOR);
  if (img.empty()) throw ImageError("image data does not decode");

  const int longest = std::max(img.cols, img.rows);
  if (longest > encoding.max_side) {
    const double scale = static_cast<double>(encoding.max_side) / longest;
    cv::Mat resized;
    cv::resize(img, resized,
               cv::Size(std::max(1, static_cast<int>(img.cols * scale + 0.5)),
                        std::max(1, static_cast<int>(img.rows * scale + 0.5))),
               0, 0, cv::INTER_AREA);
    img = resized;
  }
  std::vector<unsigned char> out;
  if (!cv::imencode(".jpg", img, out, {cv::IMWRITE_JPEG_QUALITY, encoding.jpeg_quality})) {
    throw ImageError("JPEG encoding failed");
  }
  return {"image/jpeg", std::string(out.begin(), out.end())};
}

ImagePart load_image_for_transmission(const std::filesystem::path& path, const ImageEncoding& encoding) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot read image " + path.string());
  const std::string data{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  try {
    return reencode_image(data, encoding);
  } catch (const ImageError& e) {
    throw ImageError(path.string() + ": " + e.what());
  }
}

ImageResolver::ImageResolver(std::filesystem::path root, std::string pattern)
    : root_(std::move(root)), pattern_(std::move(pattern)) {}

std::filesystem::path ImageResolver::path_for(const std::string& id) const {
  std::string rel = pattern_;
  for (auto pos = rel.find("{id}"); pos != std::string::npos; pos = rel.find("{id}", pos + id.size())) {
    rel.replace(pos, 4, id);
  }
  return root_ / rel;
}

}  // namespace cotrr
