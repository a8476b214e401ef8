#include "carid/dataset.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <thread>

#include "json.hpp"
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "carid/rng.hpp"

namespace carid {

namespace fs = std::filesystem;

std::string_view to_string(Split split) noexcept {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::unassigned: break;
  }
  return "unassigned";
}

std::optional<Split> parse_split(std::string_view text) noexcept {
  if (text == "train") return Split::train;
  if (text == "val") return Split::val;
  if (text == "test") return Split::test;
  if (text.empty() || text == "unassigned") return Split::unassigned;
  return std::nullopt;
}

std::vector<ImageRecord> DatasetManifest::records_in(Split split) const {
  std::vector<ImageRecord> out;
  for (const auto& r : records)
    if (r.split == split) out.push_back(r);
  return out;
}

std::size_t DatasetManifest::count(Split split) const {
  return static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [&](const auto& r) { return r.split == split; }));
}

void LoadReport::write_jsonl(std::ostream& out) const {
  for (const auto& issue : issues) {
    nlohmann::json line = {
        {"error", std::string(to_string(issue.code))},
        {"path", issue.path},
        {"message", issue.message},
    };
    out << line.dump() << '\n';
  }
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

// Splits one CSV line. Double-quoted fields may contain commas; "" is an
// escaped quote inside a quoted field.
std::vector<std::string> split_csv(std::string_view line) {
  std::vector<std::string> fields;
  std::string current;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        current.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        current.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back(trim(current));
      current.clear();
    } else {
      current.push_back(c);
    }
  }
  fields.emplace_back(trim(current));
  return fields;
}

std::optional<int> parse_int(std::string_view text) {
  int value = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end) return std::nullopt;
  return value;
}

[[noreturn]] void malformed(std::size_t line_no, const std::string& why) {
  throw Error(Errc::malformed_row, "line " + std::to_string(line_no) + ": " + why);
}

std::string csv_quote(const std::string& field) {
  if (field.find_first_of(",\"") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

}  // namespace

LoadResult load_manifest(const fs::path& root, const fs::path& annotation_file,
                         std::string source_tag) {
  const fs::path annotations =
      annotation_file.is_absolute() || fs::exists(annotation_file) ? annotation_file
                                                                   : root / annotation_file;
  std::ifstream in(annotations);
  if (!fs::is_regular_file(annotations) || !in) {
    throw Error(Errc::missing_annotation_file, annotations.string());
  }

  LoadResult result;
  auto& manifest = result.manifest;
  manifest.source_tag = source_tag.empty() ? root.filename().string() : std::move(source_tag);

  std::string line;
  std::size_t line_no = 0;
  int max_class = -1;
  while (std::getline(in, line)) {
    ++line_no;
    const auto view = trim(line);
    if (view.empty() || view.front() == '#') continue;
    auto fields = split_csv(view);
    if (line_no == 1 && !fields.empty() && fields[0] == "path") continue;  // header
    if (fields.size() != 6 && fields.size() != 7) {
      malformed(line_no, "expected 6 or 7 fields, got " + std::to_string(fields.size()));
    }
    if (fields[0].empty()) malformed(line_no, "empty path");

    std::array<int, 5> numbers{};
    for (std::size_t i = 0; i < numbers.size(); ++i) {
      const auto v = parse_int(fields[i + 1]);
      if (!v) malformed(line_no, "field " + std::to_string(i + 2) + " is not an integer");
      numbers[i] = *v;
    }
    ImageRecord record;
    record.image_path = fields[0];
    if (record.image_path.is_relative()) record.image_path = root / record.image_path;
    record.class_id = numbers[0];
    record.bbox = BBox{numbers[1], numbers[2], numbers[3], numbers[4]};
    if (record.class_id < 0) malformed(line_no, "negative class id");
    if (record.bbox.x_min < 0 || record.bbox.y_min < 0 || record.bbox.x_max <= record.bbox.x_min ||
        record.bbox.y_max <= record.bbox.y_min) {
      malformed(line_no, "degenerate bounding box");
    }
    if (fields.size() == 7) {
      const auto split = parse_split(fields[6]);
      if (!split) malformed(line_no, "unknown split '" + fields[6] + "'");
      record.split = *split;
    }
    max_class = std::max(max_class, record.class_id);

    if (!fs::is_regular_file(record.image_path)) {
      result.report.issues.push_back(
          {Errc::image_not_found, record.image_path.string(), "line " + std::to_string(line_no)});
    }
    manifest.records.push_back(std::move(record));
  }

  std::vector<std::string> names;
  if (std::ifstream classes(root / "classes.txt"); classes) {
    while (std::getline(classes, line)) {
      const auto name = trim(line);
      if (!name.empty()) names.emplace_back(name);
    }
  }
  const int declared = static_cast<int>(names.size());
  manifest.num_classes = std::max(max_class + 1, declared);
  if (declared != 0 && declared < manifest.num_classes) {
    throw Error(Errc::invalid_argument, "classes.txt lists " + std::to_string(declared) +
                                            " names but annotations use class id " +
                                            std::to_string(max_class));
  }
  for (int c = declared; c < manifest.num_classes; ++c) names.push_back("class_" + std::to_string(c));
  {
    auto sorted = names;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw Error(Errc::invalid_argument, "duplicate class names in classes.txt");
    }
  }
  manifest.class_names = std::move(names);

  std::vector<int> per_class(static_cast<std::size_t>(manifest.num_classes), 0);
  for (auto& record : manifest.records) {
    record.class_name = manifest.class_names[static_cast<std::size_t>(record.class_id)];
    ++per_class[static_cast<std::size_t>(record.class_id)];
  }
  for (int c = 0; c < manifest.num_classes; ++c) {
    if (per_class[static_cast<std::size_t>(c)] == 0) {
      throw Error(Errc::invalid_argument, "class id " + std::to_string(c) + " has no records");
    }
  }
  return result;
}

void write_manifest_csv(const DatasetManifest& manifest, const fs::path& root, const fs::path& out) {
  std::ofstream file(out);
  if (!file) throw Error(Errc::io_error, "cannot write " + out.string());
  file << "path,class_id,x_min,y_min,x_max,y_max,split\n";
  for (const auto& r : manifest.records) {
    std::error_code ec;
    auto rel = fs::relative(r.image_path, root, ec);
    const auto& path = ec || rel.empty() || *rel.begin() == ".." ? r.image_path : rel;
    file << csv_quote(path.string()) << ',' << r.class_id << ',' << r.bbox.x_min << ','
         << r.bbox.y_min << ',' << r.bbox.x_max << ',' << r.bbox.y_max << ',' << to_string(r.split)
         << '\n';
  }
}

cv::Mat crop_to_bbox(const cv::Mat& image, const BBox& bbox) {
  if (!bbox.fits(image.cols, image.rows)) {
    std::ostringstream msg;
    msg << "bbox (" << bbox.x_min << ',' << bbox.y_min << ',' << bbox.x_max << ',' << bbox.y_max
        << ") exceeds " << image.cols << 'x' << image.rows << " image";
    throw Error(Errc::bbox_out_of_bounds, msg.str());
  }
  return image(cv::Rect(bbox.x_min, bbox.y_min, bbox.width(), bbox.height())).clone();
}

cv::Mat load_cropped(const ImageRecord& record) {
  if (!fs::is_regular_file(record.image_path)) {
    throw Error(Errc::image_not_found, record.image_path.string());
  }
  cv::Mat image = cv::imread(record.image_path.string(), cv::IMREAD_COLOR);
  if (image.empty()) throw Error(Errc::undecodable_image, record.image_path.string());
  return crop_to_bbox(record, image);
}

PerceptualHash difference_hash(const cv::Mat& image, int hash_size) {
  if (image.empty()) throw Error(Errc::undecodable_image, "empty image");
  if (hash_size < 2) throw Error(Errc::invalid_argument, "hash_size must be >= 2");
  cv::Mat grey;
  if (image.channels() == 3) {
    cv::cvtColor(image, grey, cv::COLOR_BGR2GRAY);
  } else if (image.channels() == 4) {
    cv::cvtColor(image, grey, cv::COLOR_BGRA2GRAY);
  } else {
    grey = image;
  }
  cv::Mat grey_f;
  grey.convertTo(grey_f, CV_32F);
  cv::Mat small;
  cv::resize(grey_f, small, cv::Size(hash_size + 1, hash_size), 0, 0, cv::INTER_AREA);

  PerceptualHash hash;
  hash.bits = hash_size * hash_size;
  hash.words.assign(static_cast<std::size_t>((hash.bits + 63) / 64), 0);
  int bit = 0;
  for (int y = 0; y < hash_size; ++y) {
    const float* row = small.ptr<float>(y);
    for (int x = 0; x < hash_size; ++x, ++bit) {
      if (row[x] > row[x + 1]) hash.words[static_cast<std::size_t>(bit / 64)] |= 1ULL << (bit % 64);
    }
  }
  return hash;
}

int hamming_distance(const PerceptualHash& a, const PerceptualHash& b) {
  if (a.bits != b.bits) throw Error(Errc::invalid_argument, "hash sizes differ");
  int d = 0;
  for (std::size_t i = 0; i < a.words.size(); ++i) d += std::popcount(a.words[i] ^ b.words[i]);
  return d;
}

DedupResult dedup_by_perceptual_hash(std::span<const ImageRecord> records, int hash_size,
                                     int threshold, unsigned workers) {
  std::vector<std::optional<PerceptualHash>> hashes(records.size());
  std::vector<std::string> errors(records.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < records.size(); i = next++) {
      try {
        const cv::Mat image = cv::imread(records[i].image_path.string(), cv::IMREAD_COLOR);
        if (image.empty()) {
          errors[i] = "cannot decode";
          continue;
        }
        hashes[i] = difference_hash(image, hash_size);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(records.size())));
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work);
  }

  DedupResult result;
  std::vector<std::size_t> kept_index;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!hashes[i]) {
      result.failures.push_back({Errc::undecodable_image, records[i].image_path.string(), errors[i]});
      continue;
    }
    bool dropped = false;
    for (std::size_t k : kept_index) {
      const int d = hamming_distance(*hashes[i], *hashes[k]);
      if (d <= threshold) {
        result.dropped.push_back({records[i], records[k], d});
        dropped = true;
        break;
      }
    }
    if (!dropped) {
      kept_index.push_back(i);
      result.kept.push_back(records[i]);
    }
  }
  return result;
}

DatasetManifest stratified_split(const DatasetManifest& manifest, const SplitRatios& ratios,
                                 std::uint64_t seed) {
  const std::array<double, 3> share{ratios.train, ratios.val, ratios.test};
  for (double r : share) {
    if (!(r >= 0.0)) throw Error(Errc::invalid_argument, "split ratios must be non-negative");
  }
  if (std::abs(share[0] + share[1] + share[2] - 1.0) > 1e-9) {
    throw Error(Errc::invalid_argument, "split ratios must sum to 1");
  }
  constexpr std::array<Split, 3> kSplits{Split::train, Split::val, Split::test};

  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    by_class[manifest.records[i].class_id].push_back(i);
  }

  DatasetManifest out = manifest;
  for (auto& [class_id, members] : by_class) {
    const auto n = static_cast<double>(members.size());
    std::array<long, 3> counts{};
    std::array<double, 3> frac{};
    long assigned = 0;
    for (int s = 0; s < 3; ++s) {
      const double exact = share[s] * n;
      counts[s] = static_cast<long>(std::floor(exact + 1e-9));
      frac[s] = std::max(0.0, exact - static_cast<double>(counts[s]));
      assigned += counts[s];
    }
    long remaining = static_cast<long>(members.size()) - assigned;

    // Round up where the exact share is fractional: first the splits that
    // would otherwise stay empty, then by largest remainder.
    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      const bool empty_a = counts[a] == 0 && share[a] > 0.0;
      const bool empty_b = counts[b] == 0 && share[b] > 0.0;
      if (empty_a != empty_b) return empty_a;
      return frac[a] > frac[b];
    });
    for (int s : order) {
      if (remaining == 0) break;
      if (frac[s] > 1e-9) {
        ++counts[s];
        --remaining;
      }
    }
    // Tiny classes (e.g. 3 records at 0.7/0.15/0.15) can only fill every
    // split by taking a record from the largest one.
    for (int s = 0; s < 3; ++s) {
      if (share[s] <= 0.0 || counts[s] > 0) continue;
      const auto donor = std::max_element(counts.begin(), counts.end()) - counts.begin();
      if (counts[static_cast<std::size_t>(donor)] > 1) {
        --counts[static_cast<std::size_t>(donor)];
        ++counts[s];
      }
    }
    for (int s = 0; s < 3; ++s) {
      if (share[s] > 0.0 && counts[s] == 0) {
        throw Error(Errc::class_too_small,
                    "class " + std::to_string(class_id) + " has " + std::to_string(members.size()) +
                        " records; cannot populate the " + std::string(to_string(kSplits[s])) +
                        " split");
      }
    }

    CounterRng rng(derive_key({seed, hash_label("stratified_split"),
                               static_cast<std::uint64_t>(class_id)}));
    auto shuffled = members;
    seeded_shuffle(shuffled.begin(), shuffled.end(), rng);
    std::size_t pos = 0;
    for (int s = 0; s < 3; ++s) {
      for (long k = 0; k < counts[s]; ++k) out.records[shuffled[pos++]].split = kSplits[s];
    }
  }
  return out;
}

}  // namespace carid
