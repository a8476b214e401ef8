#include "carid/error.hpp"

namespace carid {

std::string_view to_string(Errc code) noexcept {
  switch (code) {
    case Errc::missing_annotation_file: return "MissingAnnotationFile";
    case Errc::malformed_row: return "MalformedRow";
    case Errc::image_not_found: return "ImageNotFound";
    case Errc::bbox_out_of_bounds: return "BBoxOutOfBounds";
    case Errc::class_too_small: return "ClassTooSmall";
    case Errc::invalid_argument: return "InvalidArgument";
    case Errc::unknown_transform: return "UnknownTransform";
    case Errc::invalid_range: return "InvalidRange";
    case Errc::image_too_small: return "ImageTooSmall";
    case Errc::undecodable_image: return "UndecodableImage";
    case Errc::unknown_backbone: return "UnknownBackbone";
    case Errc::pretrained_weights_unavailable: return "PretrainedWeightsUnavailable";
    case Errc::shape_mismatch: return "ShapeMismatch";
    case Errc::empty_split: return "EmptySplit";
    case Errc::nan_loss: return "NaNLoss";
    case Errc::corrupt_checkpoint: return "CorruptCheckpoint";
    case Errc::version_mismatch: return "VersionMismatch";
    case Errc::storage_unavailable: return "StorageUnavailable";
    case Errc::unknown_trial: return "UnknownTrial";
    case Errc::already_complete: return "AlreadyComplete";
    case Errc::all_trials_failed: return "AllTrialsFailed";
    case Errc::no_complete_trials: return "NoCompleteTrials";
    case Errc::missing_group_file: return "MissingGroupFile";
    case Errc::parse_error: return "ParseError";
    case Errc::unknown_override_path: return "UnknownOverridePath";
    case Errc::type_mismatch: return "TypeMismatch";
    case Errc::invalid_config: return "InvalidConfig";
    case Errc::top_k_out_of_range: return "TopKOutOfRange";
    case Errc::io_error: return "IoError";
  }
  return "Unknown";
}

}  // namespace carid
