#include "endodepth/depth_model.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

namespace endodepth {

using nn::Tensor;

void ModelConfig::validate() const {
  if (levels < 2) throw ValidationError("model: levels must be at least 2");
  if (levels > 8) throw ValidationError("model: levels must be at most 8");
  const int div = 1 << levels;
  if (height <= 0 || width <= 0 || height % div != 0 || width % div != 0) {
    throw ValidationError("model: input " + std::to_string(height) + "x" + std::to_string(width) +
                          " is not divisible by 2^levels = " + std::to_string(div));
  }
  if (base_channels < 8) throw ValidationError("model: base_channels must be at least 8");
  if (max_channels < base_channels) throw ValidationError("model: max_channels below base_channels");
  if (groups < 1) throw ValidationError("model: groups must be positive");
  for (int l = 0; l <= levels; ++l) {
    if (channels_at(l) % groups != 0) {
      throw ValidationError("model: channel width " + std::to_string(channels_at(l)) +
                            " not divisible by groups");
    }
  }
  if (border < 0 || 2 * border >= std::min(height, width)) throw ValidationError("model: border too large");
}

int ModelConfig::channels_at(int level) const {
  long c = static_cast<long>(base_channels) << level;
  return static_cast<int>(std::min<long>(c, max_channels));
}

std::string to_text(const ModelConfig& c) {
  std::ostringstream os;
  os << "height=" << c.height << "\nwidth=" << c.width << "\nlevels=" << c.levels
     << "\nbase_channels=" << c.base_channels << "\nmax_channels=" << c.max_channels
     << "\ngroups=" << c.groups << "\ndense_blocks=" << (c.dense_blocks ? 1 : 0)
     << "\nborder=" << c.border << "\nmodel_seed=" << c.seed << "\n";
  return os.str();
}

namespace {

struct Stage {
  nn::Conv2d conv;
  nn::GroupNorm norm;
  nn::Relu relu;

  Stage(const std::string& name, int in, int out, int groups)
      : conv(name + ".conv", in, out, 3), norm(name + ".norm", out, groups) {}

  Tensor forward(const Tensor& x) { return relu.forward(norm.forward(conv.forward(x))); }
  Tensor apply(const Tensor& x) const { return nn::Relu::apply(norm.apply(conv.apply(x))); }
  Tensor backward(const Tensor& g) { return conv.backward(norm.backward(relu.backward(g))); }
  void parameters(std::vector<nn::Parameter*>& out) {
    conv.parameters(out);
    norm.parameters(out);
  }
  void describe(std::vector<std::string>& out) const {
    out.push_back("conv3x3 " + std::to_string(conv.in_channels()) + "->" + std::to_string(conv.out_channels()));
    out.push_back("groupnorm " + std::to_string(norm.groups()));
    out.push_back("relu");
  }
};

// Two stages; with feature reuse the second stage also sees the block input.
struct Block {
  Stage a;
  Stage b;
  bool dense;
  int in;

  Block(const std::string& name, int in_ch, int out, int groups, bool dense_)
      : a(name + ".a", in_ch, out, groups), b(name + ".b", dense_ ? in_ch + out : out, out, groups),
        dense(dense_), in(in_ch) {}

  template <bool Train>
  Tensor run(const Tensor& x) {
    Tensor h = Train ? a.forward(x) : a.apply(x);
    if (dense) h = nn::concat_channels(x, h);
    return Train ? b.forward(h) : b.apply(h);
  }
  Tensor apply(const Tensor& x) const {
    Tensor h = a.apply(x);
    if (dense) h = nn::concat_channels(x, h);
    return b.apply(h);
  }
  Tensor backward(const Tensor& g) {
    Tensor gh = b.backward(g);
    if (!dense) return a.backward(gh);
    Tensor gx, ga;
    nn::split_channels(gh, in, gx, ga);
    Tensor gin = a.backward(ga);
    for (std::size_t i = 0; i < gin.size(); ++i) gin.data[i] += gx.data[i];
    return gin;
  }
  void parameters(std::vector<nn::Parameter*>& out) {
    a.parameters(out);
    b.parameters(out);
  }
  void describe(std::vector<std::string>& out) const {
    a.describe(out);
    if (dense) out.push_back("concat");
    b.describe(out);
  }
};

}  // namespace

struct DepthNet::Impl {
  std::vector<Block> enc;
  std::vector<nn::MaxPool2> pools;
  std::vector<Block> bottleneck;  // exactly one
  std::vector<Stage> up;
  std::vector<Block> dec;
  nn::Conv2d head;
  std::vector<int> skip_channels;

  explicit Impl(const ModelConfig& c) : head("head", c.base_channels > 0 ? c.channels_at(0) : 1, 1, 1) {
    const int L = c.levels;
    enc.reserve(L);
    up.reserve(L);
    dec.reserve(L);
    pools.resize(L);
    for (int l = 0; l < L; ++l) {
      const int in = l == 0 ? 3 : c.channels_at(l - 1);
      enc.emplace_back("enc" + std::to_string(l), in, c.channels_at(l), c.groups, c.dense_blocks);
      skip_channels.push_back(c.channels_at(l));
    }
    bottleneck.emplace_back("mid", c.channels_at(L - 1), c.channels_at(L), c.groups, c.dense_blocks);
    for (int l = 0; l < L; ++l) {
      const int in = c.channels_at(l + 1);
      up.emplace_back("up" + std::to_string(l), in, c.channels_at(l), c.groups);
      dec.emplace_back("dec" + std::to_string(l), 2 * c.channels_at(l), c.channels_at(l), c.groups,
                       c.dense_blocks);
    }
  }

  template <bool Train>
  Tensor run(const Tensor& input) {
    const int L = static_cast<int>(enc.size());
    std::vector<Tensor> skips(L);
    Tensor x = input;
    for (int l = 0; l < L; ++l) {
      skips[l] = enc[l].run<Train>(x);
      x = Train ? pools[l].forward(skips[l]) : nn::MaxPool2::apply(skips[l]);
    }
    x = bottleneck[0].run<Train>(x);
    for (int l = L - 1; l >= 0; --l) {
      Tensor u = nn::upsample_nearest2(x);
      u = Train ? up[l].forward(u) : up[l].apply(u);
      x = dec[l].run<Train>(nn::concat_channels(u, skips[l]));
    }
    return Train ? head.forward(x) : head.apply(x);
  }

  Tensor infer(const Tensor& input) const {
    const int L = static_cast<int>(enc.size());
    std::vector<Tensor> skips(L);
    Tensor x = input;
    for (int l = 0; l < L; ++l) {
      skips[l] = enc[l].apply(x);
      x = nn::MaxPool2::apply(skips[l]);
    }
    x = bottleneck[0].apply(x);
    for (int l = L - 1; l >= 0; --l) {
      Tensor u = up[l].apply(nn::upsample_nearest2(x));
      x = dec[l].apply(nn::concat_channels(u, skips[l]));
    }
    return head.apply(x);
  }

  void backward(const Tensor& grad) {
    const int L = static_cast<int>(enc.size());
    std::vector<Tensor> gskip(L);
    Tensor g = head.backward(grad);
    for (int l = 0; l < L; ++l) {
      Tensor gcat = dec[l].backward(g);
      Tensor gu;
      nn::split_channels(gcat, up[l].conv.out_channels(), gu, gskip[l]);
      g = nn::upsample_nearest2_backward(up[l].backward(gu));
    }
    g = bottleneck[0].backward(g);
    for (int l = L - 1; l >= 0; --l) {
      g = pools[l].backward(g);
      for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += gskip[l].data[i];
      g = enc[l].backward(g);
    }
  }

  void parameters(std::vector<nn::Parameter*>& out) {
    for (auto& b : enc) b.parameters(out);
    bottleneck[0].parameters(out);
    for (int l = static_cast<int>(up.size()) - 1; l >= 0; --l) {
      up[l].parameters(out);
      dec[l].parameters(out);
    }
    head.parameters(out);
  }
};

DepthNet::DepthNet(const ModelConfig& config) : config_(config) {
  config_.validate();
  impl_ = std::make_unique<Impl>(config_);
  // Initialization order follows parameters(); the head starts near a
  // constant unit depth.
  std::mt19937_64 rng(config_.seed);
  auto init_stage = [&](Stage& s) { s.conv.init(rng); };
  for (auto& b : impl_->enc) {
    init_stage(b.a);
    init_stage(b.b);
  }
  init_stage(impl_->bottleneck[0].a);
  init_stage(impl_->bottleneck[0].b);
  for (int l = config_.levels - 1; l >= 0; --l) {
    init_stage(impl_->up[l]);
    init_stage(impl_->dec[l].a);
    init_stage(impl_->dec[l].b);
  }
  impl_->head.init(rng, 0.01f, 1.0f);
}

DepthNet::~DepthNet() = default;

void DepthNet::set_input_stats(const std::array<double, 3>& mean, const std::array<double, 3>& stddev) {
  for (int ch = 0; ch < 3; ++ch) {
    if (!(stddev[ch] > 0.0)) throw InputError("set_input_stats: standard deviation must be positive");
  }
  mean_ = mean;
  std_ = stddev;
}

Tensor DepthNet::pack(const std::vector<const Image*>& images) const {
  Tensor t(static_cast<int>(images.size()), 3, config_.height, config_.width);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Image& img = *images[i];
    if (img.rows() != config_.height || img.cols() != config_.width || img.channels() != 3) {
      throw InputError("predict: expected " + std::to_string(config_.height) + "x" +
                       std::to_string(config_.width) + "x3 image, got " + std::to_string(img.rows()) + "x" +
                       std::to_string(img.cols()) + "x" + std::to_string(img.channels()));
    }
    for (int ch = 0; ch < 3; ++ch) {
      const float m = static_cast<float>(mean_[ch]);
      const float s = static_cast<float>(1.0 / std_[ch]);
      float* dst = t.channel(static_cast<int>(i), ch);
      for (int r = 0; r < img.rows(); ++r) {
        for (int c = 0; c < img.cols(); ++c) dst[r * img.cols() + c] = (img(r, c, ch) - m) * s;
      }
    }
  }
  return t;
}

Tensor DepthNet::forward(const Tensor& input) {
  if (input.c != 3 || input.h != config_.height || input.w != config_.width) {
    throw InputError("DepthNet: input tensor shape mismatch");
  }
  return impl_->run<true>(input);
}

void DepthNet::backward(const Tensor& grad_output) { impl_->backward(grad_output); }

std::vector<nn::Parameter*> DepthNet::parameters() {
  std::vector<nn::Parameter*> out;
  impl_->parameters(out);
  return out;
}

std::size_t DepthNet::parameter_count() {
  std::size_t n = 0;
  for (auto* p : parameters()) n += p->size();
  return n;
}

void DepthNet::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

std::vector<std::string> DepthNet::architecture() const {
  std::vector<std::string> out;
  for (const auto& b : impl_->enc) {
    b.describe(out);
    out.push_back("maxpool2");
  }
  impl_->bottleneck[0].describe(out);
  for (int l = config_.levels - 1; l >= 0; --l) {
    out.push_back("upsample_nearest2");
    impl_->up[l].describe(out);
    out.push_back("concat");
    impl_->dec[l].describe(out);
  }
  out.push_back("conv1x1 " + std::to_string(impl_->head.in_channels()) + "->1 linear");
  return out;
}

DepthMap DepthNet::to_depth(const Tensor& output, int sample) const {
  DepthMap d(output.h, output.w, 0.0);
  const float* src = output.channel(sample, 0);
  const int b = config_.border;
  for (int r = 0; r < output.h; ++r) {
    for (int c = 0; c < output.w; ++c) {
      d.values(r, c) = src[r * output.w + c];
      const bool inside = r >= b && c >= b && r < output.h - b && c < output.w - b;
      d.valid(r, c) = inside ? 1 : 0;
    }
  }
  return d;
}

DepthMap DepthNet::predict(const Image& image) {
  return to_depth(impl_->infer(pack({&image})), 0);
}

std::vector<DepthMap> DepthNet::predict(const std::vector<Image>& images) {
  std::vector<const Image*> ptrs;
  for (const auto& img : images) ptrs.push_back(&img);
  const Tensor out = impl_->infer(pack(ptrs));
  std::vector<DepthMap> maps;
  for (int i = 0; i < out.n; ++i) maps.push_back(to_depth(out, i));
  return maps;
}

std::unique_ptr<DepthNet> build_model(const ModelConfig& config) { return std::make_unique<DepthNet>(config); }

// ---------------------------------------------------------------------------
// Checkpoint container: "EDCK" magic, u32 version, then little-endian fields.

namespace {

constexpr char kMagic[4] = {'E', 'D', 'C', 'K'};

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  template <typename T>
  void pod(const T& v) {
    os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void floats(const std::vector<float>& v) {
    pod<std::uint64_t>(v.size());
    os_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  Reader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}
  template <typename T>
  T pod() {
    T v{};
    is_.read(reinterpret_cast<char*>(&v), sizeof(T));
    check();
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    if (n > (1ull << 30)) throw LoadError(what_ + ": corrupt string length");
    std::string s(n, '\0');
    is_.read(s.data(), static_cast<std::streamsize>(n));
    check();
    return s;
  }
  std::vector<float> floats() {
    const auto n = pod<std::uint64_t>();
    if (n > (1ull << 32)) throw LoadError(what_ + ": corrupt tensor length");
    std::vector<float> v(n);
    is_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(float)));
    check();
    return v;
  }

 private:
  void check() {
    if (!is_) throw LoadError(what_ + ": truncated checkpoint");
  }
  std::istream& is_;
  std::string what_;
};

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw WriteError("cannot write checkpoint " + tmp);
    Writer w(os);
    os.write(kMagic, 4);
    w.pod<std::uint32_t>(Checkpoint::kVersion);
    const auto& m = ck.model;
    for (int v : {m.height, m.width, m.levels, m.base_channels, m.max_channels, m.groups, m.dense_blocks ? 1 : 0,
                  m.border}) {
      w.pod<std::int32_t>(v);
    }
    w.pod<std::uint64_t>(m.seed);
    for (double v : ck.input_mean) w.pod(v);
    for (double v : ck.input_std) w.pod(v);
    w.str(ck.config_text);
    w.pod(ck.epoch);
    w.pod(ck.step);
    w.pod(ck.best_validation);
    w.str(ck.rng_state);
    w.pod<std::uint64_t>(ck.names.size());
    for (std::size_t i = 0; i < ck.names.size(); ++i) {
      w.str(ck.names[i]);
      w.floats(ck.values[i]);
    }
    w.pod<std::uint64_t>(ck.velocity.size());
    for (const auto& v : ck.velocity) w.floats(v);
    if (!os) throw WriteError("failed writing checkpoint " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw WriteError("cannot move checkpoint into place: " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open checkpoint " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw LoadError(path.string() + ": not a checkpoint file");
  Reader r(is, path.string());
  const auto version = r.pod<std::uint32_t>();
  if (version != Checkpoint::kVersion) {
    throw LoadError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  auto& m = ck.model;
  m.height = r.pod<std::int32_t>();
  m.width = r.pod<std::int32_t>();
  m.levels = r.pod<std::int32_t>();
  m.base_channels = r.pod<std::int32_t>();
  m.max_channels = r.pod<std::int32_t>();
  m.groups = r.pod<std::int32_t>();
  m.dense_blocks = r.pod<std::int32_t>() != 0;
  m.border = r.pod<std::int32_t>();
  m.seed = r.pod<std::uint64_t>();
  for (double& v : ck.input_mean) v = r.pod<double>();
  for (double& v : ck.input_std) v = r.pod<double>();
  ck.config_text = r.str();
  ck.epoch = r.pod<std::int64_t>();
  ck.step = r.pod<std::int64_t>();
  ck.best_validation = r.pod<double>();
  ck.rng_state = r.str();
  const auto n = r.pod<std::uint64_t>();
  if (n > 100000) throw LoadError(path.string() + ": corrupt parameter count");
  for (std::uint64_t i = 0; i < n; ++i) {
    ck.names.push_back(r.str());
    ck.values.push_back(r.floats());
  }
  const auto nv = r.pod<std::uint64_t>();
  if (nv != 0 && nv != n) throw LoadError(path.string() + ": velocity/parameter count mismatch");
  for (std::uint64_t i = 0; i < nv; ++i) ck.velocity.push_back(r.floats());
  return ck;
}

void capture_state(DepthNet& net, const nn::SgdMomentum* opt, Checkpoint& ck) {
  ck.model = net.config();
  ck.input_mean = net.input_mean();
  ck.input_std = net.input_std();
  ck.names.clear();
  ck.values.clear();
  for (auto* p : net.parameters()) {
    ck.names.push_back(p->name);
    ck.values.emplace_back(p->value.begin(), p->value.end());
  }
  ck.velocity.clear();
  if (opt) {
    for (const auto& v : opt->velocity()) ck.velocity.emplace_back(v.begin(), v.end());
  }
}

void restore_state(const Checkpoint& ck, DepthNet& net, nn::SgdMomentum* opt) {
  auto params = net.parameters();
  if (params.size() != ck.values.size()) throw LoadError("checkpoint does not match model architecture");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->name != ck.names[i] || params[i]->size() != ck.values[i].size()) {
      throw LoadError("checkpoint parameter mismatch at " + params[i]->name);
    }
    params[i]->value.assign(ck.values[i].begin(), ck.values[i].end());
  }
  net.set_input_stats(ck.input_mean, ck.input_std);
  if (opt) {
    if (ck.velocity.empty()) {
      for (auto& v : opt->velocity()) std::fill(v.begin(), v.end(), 0.0f);
    } else {
      if (ck.velocity.size() != opt->velocity().size()) throw LoadError("checkpoint optimizer state mismatch");
      for (std::size_t i = 0; i < ck.velocity.size(); ++i) {
        if (ck.velocity[i].size() != opt->velocity()[i].size()) throw LoadError("checkpoint optimizer state mismatch");
        opt->velocity()[i].assign(ck.velocity[i].begin(), ck.velocity[i].end());
      }
    }
  }
}

}  // namespace endodepth
