#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace carid {

// Every failure the library reports carries one of these codes so callers
// (CLI exit codes, HTTP status mapping, tests) can branch without parsing text.
enum class Errc {
  // dataset
  missing_annotation_file,
  malformed_row,
  image_not_found,
  bbox_out_of_bounds,
  class_too_small,
  invalid_argument,
  // augment
  unknown_transform,
  invalid_range,
  image_too_small,
  undecodable_image,
  // backbones
  unknown_backbone,
  pretrained_weights_unavailable,
  shape_mismatch,
  // trainer
  empty_split,
  nan_loss,
  corrupt_checkpoint,
  version_mismatch,
  // hpo
  storage_unavailable,
  unknown_trial,
  already_complete,
  all_trials_failed,
  no_complete_trials,
  // config
  missing_group_file,
  parse_error,
  unknown_override_path,
  type_mismatch,
  invalid_config,
  // serve
  top_k_out_of_range,
  io_error,
};

std::string_view to_string(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace carid
