#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "mdprop/embedding_net.hpp"
#include "mdprop/errors.hpp"

namespace mdprop {

namespace {

constexpr char kMagic[4] = {'M', 'D', 'P', 'K'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void floats(const Tensor& t) {
    for (Scalar v : t.data()) u32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  void need(std::size_t n, const char* what) {
    if (pos_ + n > in_.size()) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                        std::to_string(pos_));
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return in_[pos_++];
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = in_[pos_] | (std::uint16_t(in_[pos_ + 1]) << 8);
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  Tensor floats(const Shape& shape, const char* what, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    need(n * 4, what);
    std::vector<Scalar> v(n);
    for (auto& x : v) x = static_cast<Scalar>(std::bit_cast<float>(u32(what)));
    Tensor t = Tensor::from(shape, std::move(v));
    t.set_requires_grad(requires_grad);
    return t;
  }
  bool done() const { return pos_ == in_.size(); }
  std::span<const std::uint8_t> head(std::size_t n) const { return in_.subspan(0, std::min(n, in_.size())); }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> save_checkpoint(const MultiBNNetwork& net) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u16(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(net.k()));
  w.u32(static_cast<std::uint32_t>(net.layers().size()));
  for (const auto& layer : net.layers()) {
    w.u32(static_cast<std::uint32_t>(layer.in_dim()));
    w.u32(static_cast<std::uint32_t>(layer.out_dim()));
    w.u8(static_cast<std::uint8_t>(layer.activation));
    w.u8(layer.bn.empty() ? 0 : 1);
    w.floats(layer.weight);
    w.floats(layer.bias);
    for (const auto& set : layer.bn) {
      w.floats(set.gamma);
      w.floats(set.beta);
      w.floats(set.running_mean);
      w.floats(set.running_var);
    }
  }
  return w.take();
}

MultiBNNetwork load_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("checkpoint magic mismatch (expected MDPK)");
  for (int i = 0; i < 4; ++i) r.u8("magic");
  const auto version = r.u16("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto k = r.u32("K");
  const auto count = r.u32("layer count");
  if (k == 0 || count == 0) throw FormatError("checkpoint declares zero BN sets or zero layers");
  std::vector<Layer> layers;
  std::size_t prev_out = 0;
  for (std::uint32_t l = 0; l < count; ++l) {
    const std::size_t in = r.u32("layer width"), out = r.u32("layer width");
    if (in == 0 || out == 0) throw FormatError("checkpoint layer " + std::to_string(l) + " has zero width");
    if (l > 0 && in != prev_out) {
      throw FormatError("checkpoint layer " + std::to_string(l) + " input width " + std::to_string(in) +
                        " does not match previous output " + std::to_string(prev_out));
    }
    prev_out = out;
    Layer layer;
    const auto act = r.u8("activation");
    if (act > 1) throw FormatError("checkpoint layer " + std::to_string(l) + " has unknown activation");
    layer.activation = static_cast<Activation>(act);
    const auto has_bn = r.u8("bn flag");
    layer.weight = r.floats({in, out}, "weights", true);
    layer.bias = r.floats({out}, "bias", true);
    if (has_bn) {
      for (std::uint32_t s = 0; s < k; ++s) {
        BNParams set;
        set.gamma = r.floats({out}, "gamma", true);
        set.beta = r.floats({out}, "beta", true);
        set.running_mean = r.floats({out}, "running mean", false);
        set.running_var = r.floats({out}, "running variance", false);
        layer.bn.push_back(std::move(set));
      }
    }
    layers.push_back(std::move(layer));
  }
  if (!r.done()) throw FormatError("checkpoint has trailing bytes after byte " + std::to_string(r.pos()));
  return MultiBNNetwork(std::move(layers), k);
}

void write_checkpoint_file(const MultiBNNetwork& net, const std::string& path) {
  const auto bytes = save_checkpoint(net);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("failed writing " + path);
}

MultiBNNetwork read_checkpoint_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return load_checkpoint(bytes);
}

}  // namespace mdprop
