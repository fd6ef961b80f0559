#include "tiger/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "tiger/errors.hpp"

namespace tiger {

namespace {

constexpr char kMagic[4] = {'T', 'I', 'G', 'R'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::vector<char>& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

class Reader {
 public:
  Reader(const std::vector<char>& bytes, const std::string& origin) : bytes_(bytes), origin_(origin) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IoError(origin_ + ": truncated tensor file");
  }

  const std::vector<char>& bytes_;
  const std::string& origin_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<char> encode_tensors(const std::vector<NamedTensor>& tensors, Precision precision) {
  std::vector<char> out(kMagic, kMagic + 4);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(precision));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    for (double v : t.values()) {
      if (precision == Precision::kFloat32) {
        put<float>(out, static_cast<float>(v));
      } else {
        put<double>(out, v);
      }
    }
  }
  return out;
}

std::vector<NamedTensor> decode_tensors(const std::vector<char>& bytes, const std::string& origin) {
  Reader r(bytes, origin);
  const std::string magic = r.get_string(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw IoError(origin + ": not a tensor file (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != 1 && version != 2) throw IoError(origin + ": unsupported version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor nt;
    nt.name = r.get_string(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    if (rank > 2) throw IoError(origin + ": tensor '" + nt.name + "' has rank " + std::to_string(rank));
    ad::Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(r.get<std::uint64_t>());
      n *= d;
    }
    std::vector<double> values(n);
    for (auto& v : values) v = version == 1 ? static_cast<double>(r.get<float>()) : r.get<double>();
    nt.tensor = ad::Tensor(std::move(shape), std::move(values));
    out.push_back(std::move(nt));
  }
  if (!r.done()) throw IoError(origin + ": trailing bytes after last tensor");
  return out;
}

void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors, Precision precision) {
  atomic_write(path, encode_tensors(tensors, precision));
}

std::vector<NamedTensor> load_tensors(const std::filesystem::path& path) {
  return decode_tensors(read_file(path), path.string());
}

ad::Tensor round_to_float(const ad::Tensor& t) {
  ad::Tensor out = t;
  for (double& v : out.values()) v = static_cast<double>(static_cast<float>(v));
  return out;
}

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on " + path.string());
  return bytes;
}

void atomic_write(const std::filesystem::path& path, const std::vector<char>& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failure on " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
  atomic_write(path, std::vector<char>(bytes.begin(), bytes.end()));
}

}  // namespace tiger
