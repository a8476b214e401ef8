#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <opencv2/core.hpp>

#include "carid/error.hpp"

namespace carid {

struct BBox {
  int x_min = 0;
  int y_min = 0;
  int x_max = 0;
  int y_max = 0;

  int width() const noexcept { return x_max - x_min; }
  int height() const noexcept { return y_max - y_min; }
  bool fits(int image_width, int image_height) const noexcept {
    return 0 <= x_min && x_min < x_max && x_max <= image_width && 0 <= y_min && y_min < y_max &&
           y_max <= image_height;
  }
  friend bool operator==(const BBox&, const BBox&) = default;
};

enum class Split { unassigned, train, val, test };

std::string_view to_string(Split split) noexcept;
std::optional<Split> parse_split(std::string_view text) noexcept;

struct ImageRecord {
  std::filesystem::path image_path;
  int class_id = 0;
  std::string class_name;
  BBox bbox;
  Split split = Split::unassigned;

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct DatasetManifest {
  std::vector<ImageRecord> records;
  int num_classes = 0;
  std::vector<std::string> class_names;
  std::string source_tag;

  /// Records assigned to `split`, in manifest order.
  std::vector<ImageRecord> records_in(Split split) const;
  std::size_t count(Split split) const;
};

/// One problem found while loading; the load continues past these.
struct LoadIssue {
  Errc code = Errc::image_not_found;
  std::string path;
  std::string message;
};

struct LoadReport {
  std::vector<LoadIssue> issues;

  bool ok() const noexcept { return issues.empty(); }
  /// One `{"error": ..., "path": ..., "message": ...}` object per line.
  void write_jsonl(std::ostream& out) const;
};

struct LoadResult {
  DatasetManifest manifest;
  LoadReport report;
};

// Annotation CSV: `path,class_id,x_min,y_min,x_max,y_max[,split]`, optional
// header row, relative paths resolved against `root`. Class display names
// come from `<root>/classes.txt` (line i names class i) when present.
//
// Throws MissingAnnotationFile, MalformedRow (message carries the line
// number). Missing image files are collected into the report; their records
// stay in the manifest so the record count always equals the row count.
LoadResult load_manifest(const std::filesystem::path& root,
                         const std::filesystem::path& annotation_file,
                         std::string source_tag = {});

/// Writes the manifest in the annotation CSV format, split column included.
void write_manifest_csv(const DatasetManifest& manifest, const std::filesystem::path& root,
                        const std::filesystem::path& out);

/// Returns a deep copy of the bbox region. Throws BBoxOutOfBounds; never clamps.
cv::Mat crop_to_bbox(const cv::Mat& image, const BBox& bbox);
inline cv::Mat crop_to_bbox(const ImageRecord& record, const cv::Mat& image) {
  return crop_to_bbox(image, record.bbox);
}

/// Decodes the record's image (BGR, 8-bit) and crops it to the bbox.
cv::Mat load_cropped(const ImageRecord& record);

// ---------------------------------------------------------------------------
// Perceptual hashing

/// Difference hash: greyscale, area-resize to (hash_size+1) x hash_size, one
/// bit per horizontally adjacent pair (left brighter than right).
struct PerceptualHash {
  std::vector<std::uint64_t> words;
  int bits = 0;

  friend bool operator==(const PerceptualHash&, const PerceptualHash&) = default;
};

PerceptualHash difference_hash(const cv::Mat& image, int hash_size = 8);
int hamming_distance(const PerceptualHash& a, const PerceptualHash& b);

struct DroppedRecord {
  ImageRecord record;
  ImageRecord duplicate_of;
  int distance = 0;
};

struct DedupResult {
  std::vector<ImageRecord> kept;
  std::vector<DroppedRecord> dropped;
  std::vector<LoadIssue> failures;  // undecodable images; excluded from kept
};

// Greedy first-seen-wins in input order: a record is dropped when some
// already-kept record lies within `threshold` bits. Hashing fans out over
// `workers` threads; the result does not depend on the worker count.
DedupResult dedup_by_perceptual_hash(std::span<const ImageRecord> records, int hash_size = 8,
                                     int threshold = 10, unsigned workers = 1);

// ---------------------------------------------------------------------------
// Splitting

struct SplitRatios {
  double train = 0.7;
  double val = 0.15;
  double test = 0.15;
};

/// Per-class seeded assignment. Each split's size is the floor or ceiling of
/// its exact share, except that a split with a positive ratio never ends up
/// empty: it takes a record from the largest split when rounding leaves it
/// with none. ClassTooSmall when a class has fewer records than splits.
DatasetManifest stratified_split(const DatasetManifest& manifest, const SplitRatios& ratios,
                                 std::uint64_t seed);

}  // namespace carid
