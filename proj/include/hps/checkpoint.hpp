#pragma once

#include <filesystem>
#include <string>

#include "hps/parameter.hpp"

namespace hps {

// Layout: "HPSK1", u32 config length, config text, u32 record count, then
// per record: u32 name length, name, u8 dtype (0 = f32), u32 rank,
// u64 dims[rank], little-endian f32 payload.
void save_checkpoint(const std::filesystem::path& path,
                     const std::string& config_text,
                     const ParameterSet<float>& params);

// Config text embedded in a checkpoint. Throws DataError.
std::string read_checkpoint_config(const std::filesystem::path& path);

// Loads values into `params`; the stored name set and every shape must
// match exactly. Throws DataError.
void load_checkpoint(const std::filesystem::path& path,
                     ParameterSet<float>& params);

}  // namespace hps
