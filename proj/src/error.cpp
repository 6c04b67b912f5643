#include "epcl/error.hpp"

namespace epcl {

std::string_view to_string(Errc code) noexcept {
  switch (code) {
    case Errc::UnreadableFile: return "UnreadableFile";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::NonFiniteData: return "NonFiniteData";
    case Errc::PatchLargerThanVolume: return "PatchLargerThanVolume";
    case Errc::CountMismatch: return "CountMismatch";
    case Errc::LabelArityMismatch: return "LabelArityMismatch";
    case Errc::OddBatch: return "OddBatch";
    case Errc::BadSpatialSize: return "BadSpatialSize";
    case Errc::NotADistribution: return "NotADistribution";
    case Errc::NoValidPrototypes: return "NoValidPrototypes";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::BadConfig: return "BadConfig";
    case Errc::BadCheckpoint: return "BadCheckpoint";
  }
  return "Unknown";
}

}  // namespace epcl
