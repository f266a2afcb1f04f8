#include "txt/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>

namespace txt {

namespace {

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("truncated tensor stream");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

constexpr std::uint64_t kMaxRank = 16;
constexpr std::uint64_t kMaxName = 4096;

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  put_u64(out, t.rank());
  for (auto e : t.shape()) put_u64(out, e);
  for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
}

Tensor read_tensor(std::istream& in) {
  const auto rank = get_u64(in);
  if (rank > kMaxRank) throw std::runtime_error("tensor rank " + std::to_string(rank) + " exceeds limit");
  Shape shape(rank);
  for (auto& e : shape) e = get_u64(in);
  std::vector<double> values(element_count(shape));
  for (auto& v : values) v = std::bit_cast<double>(get_u64(in));
  return Tensor(std::move(shape), std::move(values));
}

void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  put_u64(out, tensors.size());
  for (const auto& [name, t] : tensors) {
    put_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(out, t);
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

NamedTensors load_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const auto count = get_u64(in);
  NamedTensors result;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get_u64(in);
    if (len > kMaxName) throw std::runtime_error("tensor name too long in " + path.string());
    std::string name(len, '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(len))) throw std::runtime_error("truncated checkpoint");
    result.emplace_back(std::move(name), read_tensor(in));
  }
  return result;
}

void assign_tensors(const NamedTensors& target, const NamedTensors& source) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : source) by_name[name] = &t;
  for (const auto& [name, t] : target) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint is missing tensor '" + name + "'");
    if (it->second->shape() != t.shape()) {
      throw DimensionError("checkpoint tensor '" + name + "' has shape " + to_string(it->second->shape()) +
                           ", expected " + to_string(t.shape()));
    }
    auto src = it->second->data();
    auto dst = const_cast<Tensor&>(t).mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

}  // namespace txt
