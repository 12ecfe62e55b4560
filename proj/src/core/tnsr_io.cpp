#include "canopy/tnsr_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace canopy::io {

namespace {

constexpr std::uint8_t kMagic[4] = {0x54, 0x4E, 0x53, 0x52};
constexpr std::uint8_t kVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <class U>
void put_le(std::vector<std::uint8_t>& out, U bits) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}
  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  template <class U>
  U le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    require(pos_ + n <= b_.size(), ErrorCode::kIo, "TNSR: truncated payload");
  }
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_tnsr(const Tensor& t) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  out.push_back(kVersion);
  out.push_back(static_cast<std::uint8_t>(t.dtype()));
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  if (t.dtype() == Dtype::kF32) {
    for (double v : t.data()) put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  } else {
    for (double v : t.data()) put_le(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Tensor decode_tnsr(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  for (auto m : kMagic) require(r.u8() == m, ErrorCode::kIo, "TNSR: bad magic");
  require(r.u8() == kVersion, ErrorCode::kIo, "TNSR: unsupported version");
  const std::uint8_t code = r.u8();
  require(code <= 1, ErrorCode::kIo, "TNSR: unknown dtype code " + std::to_string(code));
  const auto rank = r.le<std::uint32_t>();
  require(rank >= 1 && rank <= 16, ErrorCode::kIo, "TNSR: implausible rank");
  Shape shape(rank);
  for (auto& d : shape) d = r.le<std::uint32_t>();
  const std::size_t n = numel(shape);
  std::vector<double> data(n);
  if (code == 1) {
    for (auto& v : data) v = static_cast<double>(std::bit_cast<float>(r.le<std::uint32_t>()));
  } else {
    for (auto& v : data) v = std::bit_cast<double>(r.le<std::uint64_t>());
  }
  require(r.done(), ErrorCode::kIo, "TNSR: trailing bytes");
  Tensor t = Tensor::from_data(std::move(shape), std::move(data));
  if (code == 1) t.set_dtype(Dtype::kF32);
  return t;
}

void write_tnsr(const std::filesystem::path& path, const Tensor& t) {
  const auto bytes = encode_tnsr(t);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(f), ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(f), ErrorCode::kIo, "write failed: " + path.string());
}

Tensor read_tnsr(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorCode::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_tnsr(bytes);
}

}  // namespace canopy::io
