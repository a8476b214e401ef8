#include "synthetic.hpp"

#include <atomic>
#include <fstream>

#include <unistd.h>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "carid/rng.hpp"

namespace carid::fixtures {

namespace fs = std::filesystem;

fs::path temp_dir(std::string_view tag) {
  static std::atomic<int> counter{0};
  auto dir = fs::temp_directory_path() /
             ("carid-" + std::string(tag) + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

cv::Mat draw_shape(int cls, int size, std::uint64_t seed) {
  // BGR colours.
  static const cv::Scalar colours[] = {{40, 40, 220}, {40, 200, 40}, {220, 60, 40},
                                       {40, 200, 220}, {200, 40, 200}, {30, 30, 30}};
  CounterRng rng(derive_key({seed, hash_label("shape"), static_cast<std::uint64_t>(cls)}));
  const int bg = 180 + static_cast<int>(rng.below(50));
  cv::Mat img(size, size, CV_8UC3, cv::Scalar(bg, bg, bg));
  const int r = size / 5 + static_cast<int>(rng.below(static_cast<std::uint64_t>(size / 8 + 1)));
  const int cx = r + static_cast<int>(rng.below(static_cast<std::uint64_t>(size - 2 * r)));
  const int cy = r + static_cast<int>(rng.below(static_cast<std::uint64_t>(size - 2 * r)));
  const auto colour = colours[cls % 6];
  switch (cls % 3) {
    case 0:
      cv::circle(img, {cx, cy}, r, colour, cv::FILLED);
      break;
    case 1:
      cv::rectangle(img, cv::Rect(cx - r, cy - r, 2 * r, 2 * r), colour, cv::FILLED);
      break;
    default: {
      std::vector<cv::Point> tri = {{cx, cy - r}, {cx - r, cy + r}, {cx + r, cy + r}};
      cv::fillConvexPoly(img, tri, colour);
    }
  }
  for (int y = 0; y < size; ++y) {
    auto* row = img.ptr<cv::Vec3b>(y);
    for (int x = 0; x < size; ++x) {
      for (int c = 0; c < 3; ++c) {
        const int v = row[x][c] + static_cast<int>(rng.below(21)) - 10;
        row[x][c] = static_cast<unsigned char>(std::clamp(v, 0, 255));
      }
    }
  }
  return img;
}

DatasetManifest write_shapes_dataset(const fs::path& root, const ShapesOptions& o) {
  fs::create_directories(root / "images");
  std::ofstream csv(root / "annotations.csv");
  csv << "path,class_id,x_min,y_min,x_max,y_max" << (o.write_split ? ",split" : "") << '\n';
  int index = 0;
  for (int cls = 0; cls < o.num_classes; ++cls) {
    const std::pair<const char*, int> parts[] = {
        {"train", o.train_per_class}, {"val", o.val_per_class}, {"test", o.test_per_class}};
    for (const auto& [split, n] : parts) {
      for (int i = 0; i < n; ++i, ++index) {
        const auto name = "images/" + std::to_string(index) + ".png";
        cv::imwrite((root / name).string(), draw_shape(cls, o.size, derive_key({o.seed, static_cast<std::uint64_t>(index)})));
        csv << name << ',' << cls << ",0,0," << o.size << ',' << o.size;
        if (o.write_split) csv << ',' << split;
        csv << '\n';
      }
    }
  }
  csv.close();
  if (!o.class_names.empty()) {
    std::ofstream names(root / "classes.txt");
    for (const auto& n : o.class_names) names << n << '\n';
  }
  return load_manifest(root, root / "annotations.csv").manifest;
}

}  // namespace carid::fixtures
