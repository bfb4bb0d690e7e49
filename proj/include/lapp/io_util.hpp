#pragma once

#include <string>

namespace lapp {

std::string read_file(const std::string& path);

/// Write-then-rename so readers never observe a partial file.
void write_file_atomic(const std::string& path, const std::string& content);

bool file_exists(const std::string& path);

}  // namespace lapp
