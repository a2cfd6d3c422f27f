#include "coopadapt/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>

namespace coopadapt::checkpoint {

static_assert(std::endian::native == std::endian::little,
              "parameter blobs are little-endian; big-endian hosts need byte swaps");

void save_blob(const std::string& path, const std::vector<ad::Value>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  for (const auto& p : params) {
    if (p->name.empty()) throw std::invalid_argument("save_blob: unnamed parameter");
    const auto name_len = static_cast<std::uint32_t>(p->name.size());
    os.write(reinterpret_cast<const char*>(&name_len), sizeof(name_len));
    os.write(p->name.data(), name_len);
    const auto rank = static_cast<std::uint32_t>(p->val.shape.size());
    os.write(reinterpret_cast<const char*>(&rank), sizeof(rank));
    for (const std::int64_t d : p->val.shape) {
      os.write(reinterpret_cast<const char*>(&d), sizeof(d));
    }
    for (std::int64_t i = 0; i < p->val.numel(); ++i) {
      const float v = static_cast<float>(p->val[i]);
      os.write(reinterpret_cast<const char*>(&v), sizeof(v));
      p->val[i] = static_cast<double>(v);  // live state == serialized state
    }
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

void load_blob(const std::string& path, const std::vector<ad::Value>& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);

  struct Record {
    std::vector<std::int64_t> shape;
    std::vector<float> data;
  };
  std::map<std::string, Record> records;
  while (true) {
    std::uint32_t name_len = 0;
    is.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
    if (!is) break;
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    std::uint32_t rank = 0;
    is.read(reinterpret_cast<char*>(&rank), sizeof(rank));
    Record rec;
    rec.shape.resize(rank);
    for (auto& d : rec.shape) is.read(reinterpret_cast<char*>(&d), sizeof(d));
    const std::int64_t n = ad::Tensor::numel_of(rec.shape);
    rec.data.resize(static_cast<std::size_t>(n));
    is.read(reinterpret_cast<char*>(rec.data.data()),
            static_cast<std::streamsize>(n * sizeof(float)));
    if (!is) throw std::runtime_error("truncated parameter blob: " + path);
    if (!records.emplace(std::move(name), std::move(rec)).second) {
      throw std::runtime_error("duplicate parameter record in " + path);
    }
  }

  for (const auto& p : params) {
    const auto it = records.find(p->name);
    if (it == records.end()) {
      throw std::runtime_error("checkpoint " + path + " is missing parameter " + p->name);
    }
    if (it->second.shape != p->val.shape) {
      throw std::runtime_error("checkpoint " + path + ": shape mismatch for " + p->name);
    }
    for (std::int64_t i = 0; i < p->val.numel(); ++i) {
      p->val[i] = static_cast<double>(it->second.data[static_cast<std::size_t>(i)]);
    }
    records.erase(it);
  }
  if (!records.empty()) {
    throw std::runtime_error("checkpoint " + path + " carries unknown parameter " +
                             records.begin()->first);
  }
}

void write_json_file(const std::string& path, const std::string& json_text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os << json_text;
  if (!os) throw std::runtime_error("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  std::string out((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return out;
}

bool file_exists(const std::string& path) { return std::filesystem::exists(path); }

}  // namespace coopadapt::checkpoint
