#pragma once

#include <string>
#include <vector>

#include "coopadapt/autograd.hpp"

namespace coopadapt::checkpoint {

// Parameter blob format: per record a u32 name length, the name bytes, a u32
// rank, i64 dims, then little-endian float32 data. Writing also re-syncs the
// live (double) values from the written float32 image so that saving and
// resuming is bit-stable.
void save_blob(const std::string& path, const std::vector<ad::Value>& params);

// Strict load: every model parameter must be present with a matching shape,
// and the file must not carry extras.
void load_blob(const std::string& path, const std::vector<ad::Value>& params);

void write_json_file(const std::string& path, const std::string& json_text);
std::string read_text_file(const std::string& path);
bool file_exists(const std::string& path);

}  // namespace coopadapt::checkpoint
