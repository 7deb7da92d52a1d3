#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "flowkrig/train.hpp"

namespace flowkrig {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary layout, all integers little-endian:
///   "STCAGCN1"
///   u32 parameter count
///   per parameter: u32 name length, name bytes, u32 rank, rank x u32 dims,
///                  f64 values (row-major)
///   config block: UTF-8 "key=value\n" lines up to end of file
/// Stored ranks drop leading unit axes, keeping at least one.
std::string serialize_model(const TrainedModel& model);
TrainedModel deserialize_model(std::string_view bytes);

void save_model(const std::filesystem::path& path, const TrainedModel& model);
TrainedModel load_model(const std::filesystem::path& path);

/// Exact serialized size predicted from parameter shapes and the config text.
std::size_t expected_checkpoint_size(const TrainedModel& model);

}  // namespace flowkrig
