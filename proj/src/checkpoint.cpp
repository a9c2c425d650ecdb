#include "hps/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

namespace hps {
namespace {

constexpr char kMagic[5] = {'H', 'P', 'S', 'K', '1'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename U>
void put(std::ofstream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path)
      : in_(path, std::ios::binary), path_(path.string()) {
    if (!in_) throw DataError("cannot open checkpoint " + path_);
    char magic[5];
    bytes(magic, sizeof magic);
    if (std::memcmp(magic, kMagic, sizeof magic) != 0) {
      throw DataError(path_ + " is not a checkpoint (bad magic)");
    }
  }

  template <typename U>
  U get() {
    U v;
    bytes(reinterpret_cast<char*>(&v), sizeof v);
    return v;
  }

  std::string text(std::size_t n) {
    if (n > (1u << 26)) throw DataError(path_ + ": implausible string length");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

  void bytes(char* dst, std::size_t n) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw DataError(path_ + ": truncated checkpoint");
    }
  }

  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }
  const std::string& path() const { return path_; }

 private:
  std::ifstream in_;
  std::string path_;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path,
                     const std::string& config_text,
                     const ParameterSet<float>& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(config_text.size()));
  out.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put<std::uint8_t>(out, 0);
    const Shape& shape = p.value().shape();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) put<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(p.value().data()),
              static_cast<std::streamsize>(p.value().size() * sizeof(float)));
  }
  out.flush();
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

std::string read_checkpoint_config(const std::filesystem::path& path) {
  Reader r(path);
  return r.text(r.get<std::uint32_t>());
}

void load_checkpoint(const std::filesystem::path& path,
                     ParameterSet<float>& params) {
  Reader r(path);
  r.text(r.get<std::uint32_t>());
  const auto count = r.get<std::uint32_t>();
  std::set<std::string> seen;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string name = r.text(r.get<std::uint32_t>());
    if (r.get<std::uint8_t>() != 0) {
      throw DataError(r.path() + ": unsupported dtype for " + name);
    }
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw DataError(r.path() + ": implausible rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    Parameter<float>* p = params.find(name);
    if (!p) throw DataError(r.path() + ": unexpected parameter " + name);
    if (p->value().shape() != shape) {
      throw DataError(r.path() + ": shape of " + name + " is " +
                      shape_str(shape) + ", model expects " +
                      shape_str(p->value().shape()));
    }
    r.bytes(reinterpret_cast<char*>(p->value().data()),
            p->value().size() * sizeof(float));
    seen.insert(name);
  }
  if (seen.size() != params.size()) {
    for (const auto& p : params) {
      if (!seen.count(p.name)) {
        throw DataError(r.path() + ": missing parameter " + p.name);
      }
    }
  }
  if (!r.at_end()) throw DataError(r.path() + ": trailing bytes");
}

}  // namespace hps
