#include "nerdd/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>

#include "nerdd/errors.hpp"

namespace nerdd::fusion {

// ---------------------------------------------------------------------------
// enums and configuration

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::SingleEvent:
      return "single_event";
    case Strategy::SingleRgb:
      return "single_rgb";
    case Strategy::Pool:
      return "pool";
    case Strategy::AsymRgbToEv:
      return "asym_rgb_to_ev";
    case Strategy::AsymEvToRgb:
      return "asym_ev_to_rgb";
    case Strategy::Symmetric:
      return "symmetric";
  }
  return "?";
}

std::string to_string(Cutoff c) {
  switch (c) {
    case Cutoff::Backbone:
      return "backbone";
    case Cutoff::Encoder:
      return "encoder";
    case Cutoff::Decoder:
      return "decoder";
  }
  return "?";
}

const std::vector<Strategy>& all_strategies() {
  static const std::vector<Strategy> v{Strategy::SingleEvent, Strategy::SingleRgb,   Strategy::Pool,
                                       Strategy::AsymRgbToEv, Strategy::AsymEvToRgb, Strategy::Symmetric};
  return v;
}

const std::vector<Cutoff>& all_cutoffs() {
  static const std::vector<Cutoff> v{Cutoff::Backbone, Cutoff::Encoder, Cutoff::Decoder};
  return v;
}

bool is_fusion(Strategy s) { return s != Strategy::SingleEvent && s != Strategy::SingleRgb; }

std::vector<std::pair<Strategy, Cutoff>> valid_pairs() {
  std::vector<std::pair<Strategy, Cutoff>> out;
  for (auto s : all_strategies()) {
    for (auto c : all_cutoffs()) out.emplace_back(s, c);
  }
  return out;
}

namespace {

std::string valid_pair_list() {
  std::string msg;
  for (auto [s, c] : valid_pairs()) {
    if (!msg.empty()) msg += ", ";
    msg += to_string(s) + "@" + to_string(c);
  }
  return msg;
}

}  // namespace

Strategy parse_strategy(const std::string& s) {
  for (auto v : all_strategies()) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown strategy '" + s + "'; valid strategy@cutoff pairs: " + valid_pair_list());
}

Cutoff parse_cutoff(const std::string& s) {
  for (auto v : all_cutoffs()) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown cutoff '" + s + "'; valid strategy@cutoff pairs: " + valid_pair_list());
}

void validate(const FusionConfig& cfg) {
  const auto pairs = valid_pairs();
  if (std::find(pairs.begin(), pairs.end(), std::make_pair(cfg.strategy, cfg.cutoff)) == pairs.end()) {
    throw ConfigError("invalid strategy/cutoff combination; valid pairs: " + valid_pair_list());
  }
  if (cfg.d < 1 || cfg.heads < 1 || cfg.d % cfg.heads != 0) throw ConfigError("d must be divisible by heads");
  if (cfg.n_queries < 1) throw ConfigError("need at least one object query");
  if (cfg.patch < 1) throw ConfigError("patch size must be positive");
  if (cfg.encoder_layers < 0 || cfg.decoder_layers < 1) throw ConfigError("invalid layer counts");
  if (cfg.event_channels < 1 || cfg.rgb_channels < 1) throw ConfigError("channel counts must be positive");
}

std::string groups::layer(const std::string& group, int index) { return group + "." + std::to_string(index); }

// ---------------------------------------------------------------------------
// parameters

void ParamStore::add(const std::string& name, Matrix init) {
  Matrix g = Matrix::Zero(init.rows(), init.cols());
  entries_[name] = Entry{std::move(init), std::move(g)};
}

Matrix& ParamStore::value(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("missing parameter '" + name + "'");
  return it->second.value;
}

const Matrix& ParamStore::value(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("missing parameter '" + name + "'");
  return it->second.value;
}

Matrix& ParamStore::grad(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("missing parameter '" + name + "'");
  return it->second.grad;
}

const Matrix& ParamStore::grad(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("missing parameter '" + name + "'");
  return it->second.grad;
}

void ParamStore::zero_grad() {
  for (auto& [name, e] : entries_) e.grad.setZero();
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, e] : entries_) out.push_back(name);
  return out;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, e] : entries_) n += static_cast<std::size_t>(e.value.size());
  return n;
}

void ParamStore::copy_group(const std::string& from_prefix, const std::string& to_prefix) {
  bool any = false;
  for (auto& [name, e] : entries_) {
    if (name.rfind(from_prefix + ".", 0) != 0) continue;
    const std::string target = to_prefix + name.substr(from_prefix.size());
    Matrix& dst = value(target);
    if (dst.rows() != e.value.rows() || dst.cols() != e.value.cols()) {
      throw ShapeError("copy_group: shape mismatch for " + target);
    }
    dst = e.value;
    any = true;
  }
  if (!any) throw ConfigError("copy_group: no parameters under '" + from_prefix + "'");
}

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t name_seed(const std::string& name, std::uint64_t seed) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : name) h = (h ^ c) * 1099511628211ULL;
  return h ^ (seed * 0x9E3779B97F4A7C15ULL);
}

Matrix uniform(int rows, int cols, double bound, std::uint64_t state) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const double u = static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53;  // [0, 1)
    m.data()[i] = (2.0 * u - 1.0) * bound;
  }
  return m;
}

void add_uniform(ParamStore& ps, const std::string& name, int rows, int cols, double bound, std::uint64_t seed) {
  ps.add(name, uniform(rows, cols, bound, name_seed(name, seed)));
}

}  // namespace

void add_attention_params(ParamStore& ps, const std::string& prefix, int d, bool layer_norm, std::uint64_t seed) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  for (const char* w : {".wq", ".wk", ".wv", ".wo"}) add_uniform(ps, prefix + w, d, d, bound, seed);
  if (layer_norm) {
    ps.add(prefix + ".ln_g", Matrix::Ones(1, d));
    ps.add(prefix + ".ln_b", Matrix::Zero(1, d));
  }
}

void add_head_params(ParamStore& ps, int d, std::uint64_t seed) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  const std::string& h = groups::kHead;
  add_uniform(ps, h + ".cls_w", d, 2, bound, seed);
  ps.add(h + ".cls_b", Matrix::Zero(1, 2));
  add_uniform(ps, h + ".box_w1", d, d, bound, seed);
  ps.add(h + ".box_b1", Matrix::Zero(1, d));
  add_uniform(ps, h + ".box_w2", d, d, bound, seed);
  ps.add(h + ".box_b2", Matrix::Zero(1, d));
  add_uniform(ps, h + ".box_w3", d, 4, bound, seed);
  ps.add(h + ".box_b3", Matrix::Zero(1, 4));
}

ParamStore init_params(const FusionConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  ParamStore ps;
  const int d = cfg.d;
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  const int pp = cfg.patch * cfg.patch;
  const bool uses_ev = cfg.strategy != Strategy::SingleRgb;
  const bool uses_rgb = cfg.strategy != Strategy::SingleEvent;
  auto tokenizer = [&](const std::string& g, int channels) {
    add_uniform(ps, g + ".w", channels * pp, d, bound, seed);
    ps.add(g + ".b", Matrix::Zero(1, d));
  };
  auto encoder = [&](const std::string& g) {
    for (int l = 0; l < cfg.encoder_layers; ++l) add_attention_params(ps, groups::layer(g, l), d, cfg.layer_norm, seed);
  };
  auto decoder = [&](const std::string& g) {
    for (int l = 0; l < cfg.decoder_layers; ++l) add_attention_params(ps, groups::layer(g, l), d, cfg.layer_norm, seed);
  };

  if (uses_ev) tokenizer(groups::kTokEvent, cfg.event_channels);
  if (uses_rgb) tokenizer(groups::kTokRgb, cfg.rgb_channels);

  if (!is_fusion(cfg.strategy)) {
    encoder(uses_ev ? groups::kEncEvent : groups::kEncRgb);
    decoder(groups::kDecoder);
  } else if (cfg.cutoff == Cutoff::Backbone) {
    encoder(groups::kEncFused);
    decoder(groups::kDecoder);
  } else {
    encoder(groups::kEncEvent);
    encoder(groups::kEncRgb);
    if (cfg.cutoff == Cutoff::Decoder) {
      decoder(groups::kDecEvent);
      decoder(groups::kDecRgb);
    } else {
      decoder(groups::kDecoder);
    }
  }
  if (cfg.strategy == Strategy::AsymRgbToEv || cfg.strategy == Strategy::Symmetric) {
    add_attention_params(ps, groups::kInjectEvent, d, cfg.layer_norm, seed);
  }
  if (cfg.strategy == Strategy::AsymEvToRgb || cfg.strategy == Strategy::Symmetric) {
    add_attention_params(ps, groups::kInjectRgb, d, cfg.layer_norm, seed);
  }
  add_uniform(ps, groups::kQueries, cfg.n_queries, d, bound, seed);
  add_head_params(ps, d, seed);
  return ps;
}

namespace {

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("weights: truncated file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

void write_f64(std::ostream& out, double d) {
  std::uint64_t bits = 0;
  std::memcpy(&bits, &d, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

double read_f64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw FormatError("weights: truncated file");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double d = 0;
  std::memcpy(&d, &bits, 8);
  return d;
}

}  // namespace

void save_params(const std::string& path, const ParamStore& ps) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write weights file " + path);
  out.write("NWT1", 4);
  const auto names = ps.names();
  write_u32(out, static_cast<std::uint32_t>(names.size()));
  for (const auto& name : names) {
    const Matrix& m = ps.value(name);
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<std::uint32_t>(m.rows()));
    write_u32(out, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) write_f64(out, m(r, c));
    }
  }
}

void load_params(const std::string& path, ParamStore& ps) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open weights file " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "NWT1", 4) != 0) throw FormatError("weights: bad magic");
  const std::uint32_t count = read_u32(in);
  if (count != ps.names().size()) {
    throw ShapeError("weights: file holds " + std::to_string(count) + " matrices, model expects " +
                     std::to_string(ps.names().size()));
  }
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t len = read_u32(in);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw FormatError("weights: truncated name");
    const std::uint32_t rows = read_u32(in);
    const std::uint32_t cols = read_u32(in);
    if (!ps.contains(name)) throw ShapeError("weights: unexpected matrix '" + name + "'");
    Matrix& m = ps.value(name);
    if (m.rows() != rows || m.cols() != cols) throw ShapeError("weights: shape mismatch for '" + name + "'");
    for (std::uint32_t r = 0; r < rows; ++r) {
      for (std::uint32_t c = 0; c < cols; ++c) m(r, c) = read_f64(in);
    }
  }
}

// ---------------------------------------------------------------------------
// tape

Tape::Id Tape::leaf(Matrix value) { return record(std::move(value), nullptr); }

Tape::Id Tape::record(Matrix value, Backward backward) {
  nodes_.push_back(Node{std::move(value), Matrix(), std::move(backward)});
  return static_cast<Id>(nodes_.size() - 1);
}

void Tape::accumulate(Id id, const Matrix& d) {
  Matrix& g = nodes_[static_cast<std::size_t>(id)].grad;
  if (g.size() == 0) {
    g = d;
  } else {
    g += d;
  }
}

void Tape::backward(Id out, const Matrix& d_out) {
  accumulate(out, d_out);
  for (Id id = out; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.backward && n.grad.size() != 0) {
      const Matrix g = n.grad;
      n.backward(*this, g);
    }
  }
}

// ---------------------------------------------------------------------------
// building blocks

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    double sum = 0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      out(r, c) = std::exp(logits(r, c) - mx);
      sum += out(r, c);
    }
    out.row(r) /= sum;
  }
  return out;
}

Matrix positional_encoding(int rows, int cols, int d) {
  Matrix pos(static_cast<Eigen::Index>(rows) * cols, d);
  const int half = std::max(1, d / 2);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const Eigen::Index n = static_cast<Eigen::Index>(r) * cols + c;
      for (int k = 0; k < d; ++k) {
        const bool row_part = k < half;
        const int kk = row_part ? k : k - half;
        const int span = row_part ? half : d - half;
        const double p = row_part ? r : c;
        const double freq = std::pow(10000.0, -2.0 * (kk / 2) / std::max(1, span));
        pos(n, k) = (kk % 2 == 0) ? std::sin(p * freq) : std::cos(p * freq);
      }
    }
  }
  return pos;
}

namespace {

void check_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw NumericError(std::string(what) + ": non-finite input");
}


struct LayerNormCache {
  Matrix xhat;
  Eigen::VectorXd inv_std;
};

constexpr double kLayerNormEps = 1e-5;

Matrix layer_norm_forward(const Matrix& x, const Matrix& gain, const Matrix& bias, LayerNormCache& cache) {
  const Eigen::Index n = x.rows();
  const auto d = static_cast<double>(x.cols());
  cache.xhat.resize(n, x.cols());
  cache.inv_std.resize(n);
  Matrix y(n, x.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mean = x.row(r).sum() / d;
    const double var = (x.row(r).array() - mean).square().sum() / d;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.inv_std(r) = inv;
    cache.xhat.row(r) = (x.row(r).array() - mean) * inv;
    y.row(r) = cache.xhat.row(r).cwiseProduct(gain) + bias;
  }
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const Matrix& gain, const LayerNormCache& cache, Matrix& d_gain,
                           Matrix& d_bias) {
  const auto d = static_cast<double>(dy.cols());
  Matrix dx(dy.rows(), dy.cols());
  d_gain += (dy.cwiseProduct(cache.xhat)).colwise().sum();
  d_bias += dy.colwise().sum();
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const Eigen::RowVectorXd dxhat = dy.row(r).cwiseProduct(gain);
    const double m1 = dxhat.sum() / d;
    const double m2 = dxhat.cwiseProduct(cache.xhat.row(r)).sum() / d;
    dx.row(r) = cache.inv_std(r) * (dxhat.array() - m1 - cache.xhat.row(r).array() * m2).matrix();
  }
  return dx;
}

}  // namespace

Tape::Id parameter(Tape& tape, ParamStore& ps, const std::string& name) {
  return tape.record(ps.value(name), [&ps, name](Tape&, const Matrix& d) { ps.grad(name) += d; });
}

Tape::Id tokenize(Tape& tape, const PlanarImage& img, int patch, ParamStore& ps, const std::string& prefix) {
  if (patch < 1) throw ShapeError("patch size must be positive");
  const Matrix& w = ps.value(prefix + ".w");
  const Matrix& b = ps.value(prefix + ".b");
  const int feat = img.channels * patch * patch;
  if (w.rows() != feat) {
    throw ShapeError("tokenizer '" + prefix + "' expects " + std::to_string(w.rows() / (patch * patch)) +
                     " channels, image has " + std::to_string(img.channels));
  }
  const int rows = (img.height + patch - 1) / patch;
  const int cols = (img.width + patch - 1) / patch;
  if (rows == 0 || cols == 0) throw ShapeError("empty image");
  Matrix patches = Matrix::Zero(static_cast<Eigen::Index>(rows) * cols, feat);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const Eigen::Index n = static_cast<Eigen::Index>(r) * cols + c;
      for (int ch = 0; ch < img.channels; ++ch) {
        for (int py = 0; py < patch; ++py) {
          const int y = r * patch + py;
          if (y >= img.height) continue;
          for (int px = 0; px < patch; ++px) {
            const int x = c * patch + px;
            if (x >= img.width) continue;
            patches(n, (ch * patch + py) * patch + px) = img.at(ch, y, x);
          }
        }
      }
    }
  }
  check_finite(patches, "tokenize");
  Matrix tokens = patches * w;
  tokens.rowwise() += b.row(0);
  tokens += positional_encoding(rows, cols, static_cast<int>(w.cols()));
  return tape.record(std::move(tokens), [&ps, prefix, patches = std::move(patches)](Tape&, const Matrix& d) {
    ps.grad(prefix + ".w").noalias() += patches.transpose() * d;
    ps.grad(prefix + ".b") += d.colwise().sum();
  });
}

Tape::Id cross_attention(Tape& tape, Tape::Id main, Tape::Id comp, ParamStore& ps, const std::string& prefix,
                         const AttentionOptions& opt) {
  const Matrix& x = tape.value(main);
  const Matrix& y = tape.value(comp);
  check_finite(x, "attention");
  check_finite(y, "attention");
  const Matrix& wq = ps.value(prefix + ".wq");
  const Matrix& wk = ps.value(prefix + ".wk");
  const Matrix& wv = ps.value(prefix + ".wv");
  const Matrix& wo = ps.value(prefix + ".wo");
  const Eigen::Index d = wq.rows();
  if (x.cols() != d || y.cols() != d) throw ShapeError("attention '" + prefix + "': token width mismatch");
  if (opt.heads < 1 || d % opt.heads != 0) throw ShapeError("attention: width not divisible by heads");
  const Eigen::Index dh = d / opt.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  struct Cache {
    Matrix x, y, q, k, v, o, pre;
    std::vector<Matrix> attn;
    LayerNormCache ln;
  };
  auto cache = std::make_shared<Cache>();
  cache->x = x;
  cache->y = y;
  cache->q = x * wq;
  cache->k = y * wk;
  cache->v = y * wv;
  cache->o = Matrix::Zero(x.rows(), d);
  for (int h = 0; h < opt.heads; ++h) {
    const Matrix s = cache->q.middleCols(h * dh, dh) * cache->k.middleCols(h * dh, dh).transpose() * scale;
    cache->attn.push_back(softmax_rows(s));
    cache->o.middleCols(h * dh, dh) = cache->attn.back() * cache->v.middleCols(h * dh, dh);
  }
  Matrix out = x + cache->o * wo;
  if (opt.layer_norm) {
    cache->pre = out;
    out = layer_norm_forward(cache->pre, ps.value(prefix + ".ln_g"), ps.value(prefix + ".ln_b"), cache->ln);
  }

  return tape.record(std::move(out), [&ps, prefix, cache, main, comp, opt, dh, scale](Tape& t, const Matrix& d_out) {
    Matrix d_pre = d_out;
    if (opt.layer_norm) {
      d_pre = layer_norm_backward(d_out, ps.value(prefix + ".ln_g"), cache->ln, ps.grad(prefix + ".ln_g"),
                                  ps.grad(prefix + ".ln_b"));
    }
    const Matrix& wq = ps.value(prefix + ".wq");
    const Matrix& wk = ps.value(prefix + ".wk");
    const Matrix& wv = ps.value(prefix + ".wv");
    const Matrix& wo = ps.value(prefix + ".wo");

    ps.grad(prefix + ".wo").noalias() += cache->o.transpose() * d_pre;
    const Matrix d_o = d_pre * wo.transpose();

    Matrix d_q = Matrix::Zero(cache->q.rows(), cache->q.cols());
    Matrix d_k = Matrix::Zero(cache->k.rows(), cache->k.cols());
    Matrix d_v = Matrix::Zero(cache->v.rows(), cache->v.cols());
    for (int h = 0; h < opt.heads; ++h) {
      const Matrix& a = cache->attn[static_cast<std::size_t>(h)];
      const auto d_oh = d_o.middleCols(h * dh, dh);
      const Matrix d_a = d_oh * cache->v.middleCols(h * dh, dh).transpose();
      d_v.middleCols(h * dh, dh) = a.transpose() * d_oh;
      const Eigen::VectorXd row_dot = d_a.cwiseProduct(a).rowwise().sum();
      const Matrix d_s = a.cwiseProduct(d_a.colwise() - row_dot);
      d_q.middleCols(h * dh, dh) = d_s * cache->k.middleCols(h * dh, dh) * scale;
      d_k.middleCols(h * dh, dh) = d_s.transpose() * cache->q.middleCols(h * dh, dh) * scale;
    }
    ps.grad(prefix + ".wq").noalias() += cache->x.transpose() * d_q;
    ps.grad(prefix + ".wk").noalias() += cache->y.transpose() * d_k;
    ps.grad(prefix + ".wv").noalias() += cache->y.transpose() * d_v;

    Matrix d_x = d_pre;
    d_x.noalias() += d_q * wq.transpose();
    Matrix d_y = d_k * wk.transpose();
    d_y.noalias() += d_v * wv.transpose();
    t.accumulate(main, d_x);
    t.accumulate(comp, d_y);
  });
}

Tape::Id self_attention_encode(Tape& tape, Tape::Id x, ParamStore& ps, const std::string& prefix,
                               const AttentionOptions& opt) {
  return cross_attention(tape, x, x, ps, prefix, opt);
}

Tape::Id pool_fuse(Tape& tape, Tape::Id a, Tape::Id b) {
  const Matrix& va = tape.value(a);
  const Matrix& vb = tape.value(b);
  if (va.rows() != vb.rows() || va.cols() != vb.cols()) throw ShapeError("pool_fuse: token sets differ in shape");
  Matrix out = (va + vb) / 2.0;
  return tape.record(std::move(out), [a, b](Tape& t, const Matrix& d) {
    const Matrix half = d / 2.0;
    t.accumulate(a, half);
    t.accumulate(b, half);
  });
}

Tape::Id asymmetric_inject(Tape& tape, Tape::Id main, Tape::Id comp, ParamStore& ps, const std::string& prefix,
                           const AttentionOptions& opt) {
  const Matrix& m = tape.value(main);
  const Matrix& c = tape.value(comp);
  if (m.rows() != c.rows() || m.cols() != c.cols()) {
    throw ShapeError("asymmetric_inject: modalities must share token count and width");
  }
  return cross_attention(tape, main, comp, ps, prefix, opt);
}

Tape::Id symmetric_fuse(Tape& tape, Tape::Id a, Tape::Id b, ParamStore& ps, const std::string& prefix_a,
                        const std::string& prefix_b, const AttentionOptions& opt) {
  const Tape::Id a_informed = asymmetric_inject(tape, a, b, ps, prefix_a, opt);
  const Tape::Id b_informed = asymmetric_inject(tape, b, a, ps, prefix_b, opt);
  return pool_fuse(tape, a_informed, b_informed);
}

Tape::Id decode_queries(Tape& tape, Tape::Id queries, Tape::Id fused, ParamStore& ps, const std::string& prefix,
                        const AttentionOptions& opt) {
  return cross_attention(tape, queries, fused, ps, prefix, opt);
}

Tape::Id predict_heads(Tape& tape, Tape::Id embeddings, ParamStore& ps) {
  const Matrix& e = tape.value(embeddings);
  const std::string& h = groups::kHead;
  const Matrix& cls_w = ps.value(h + ".cls_w");
  if (e.cols() != cls_w.rows()) throw ShapeError("predict_heads: embedding width mismatch");
  check_finite(e, "predict_heads");

  struct Cache {
    Matrix e, probs, z1, h1, z2, h2, box;
  };
  auto cache = std::make_shared<Cache>();
  cache->e = e;
  Matrix logits = e * cls_w;
  logits.rowwise() += ps.value(h + ".cls_b").row(0);
  cache->probs = softmax_rows(logits);
  cache->z1 = e * ps.value(h + ".box_w1");
  cache->z1.rowwise() += ps.value(h + ".box_b1").row(0);
  cache->h1 = cache->z1.cwiseMax(0.0);
  cache->z2 = cache->h1 * ps.value(h + ".box_w2");
  cache->z2.rowwise() += ps.value(h + ".box_b2").row(0);
  cache->h2 = cache->z2.cwiseMax(0.0);
  Matrix z3 = cache->h2 * ps.value(h + ".box_w3");
  z3.rowwise() += ps.value(h + ".box_b3").row(0);
  cache->box = (1.0 / (1.0 + (-z3.array()).exp())).matrix();

  std::uint64_t mask = 0;
  for (Eigen::Index i = 0; i < cache->z1.size(); ++i) mask = mask * 31 + (cache->z1.data()[i] > 0);
  for (Eigen::Index i = 0; i < cache->z2.size(); ++i) mask = mask * 31 + (cache->z2.data()[i] > 0);
  tape.mix_signature(mask);

  Matrix out(e.rows(), 6);
  out.leftCols(2) = cache->probs;
  out.rightCols(4) = cache->box;
  return tape.record(std::move(out), [&ps, cache, embeddings](Tape& t, const Matrix& d_out) {
    const std::string& h = groups::kHead;
    const Matrix d_probs = d_out.leftCols(2);
    const Matrix d_box = d_out.rightCols(4);

    const Eigen::VectorXd row_dot = d_probs.cwiseProduct(cache->probs).rowwise().sum();
    const Matrix d_logits = cache->probs.cwiseProduct(d_probs.colwise() - row_dot);
    ps.grad(h + ".cls_w").noalias() += cache->e.transpose() * d_logits;
    ps.grad(h + ".cls_b") += d_logits.colwise().sum();
    Matrix d_e = d_logits * ps.value(h + ".cls_w").transpose();

    const Matrix d_z3 = d_box.cwiseProduct(cache->box.cwiseProduct((1.0 - cache->box.array()).matrix()));
    ps.grad(h + ".box_w3").noalias() += cache->h2.transpose() * d_z3;
    ps.grad(h + ".box_b3") += d_z3.colwise().sum();
    const Matrix d_h2 = d_z3 * ps.value(h + ".box_w3").transpose();
    const Matrix d_z2 = d_h2.cwiseProduct((cache->z2.array() > 0).cast<double>().matrix());
    ps.grad(h + ".box_w2").noalias() += cache->h1.transpose() * d_z2;
    ps.grad(h + ".box_b2") += d_z2.colwise().sum();
    const Matrix d_h1 = d_z2 * ps.value(h + ".box_w2").transpose();
    const Matrix d_z1 = d_h1.cwiseProduct((cache->z1.array() > 0).cast<double>().matrix());
    ps.grad(h + ".box_w1").noalias() += cache->e.transpose() * d_z1;
    ps.grad(h + ".box_b1") += d_z1.colwise().sum();
    d_e.noalias() += d_z1 * ps.value(h + ".box_w1").transpose();
    t.accumulate(embeddings, d_e);
  });
}

Tape::Id forward_detect(Tape& tape, const PlanarImage& ev, const PlanarImage& rgb, const FusionConfig& cfg,
                        ParamStore& ps) {
  validate(cfg);
  const AttentionOptions opt{cfg.heads, cfg.layer_norm};
  const bool needs_ev = cfg.strategy != Strategy::SingleRgb;
  const bool needs_rgb = cfg.strategy != Strategy::SingleEvent;
  if (needs_ev && needs_rgb && (ev.width != rgb.width || ev.height != rgb.height)) {
    throw ShapeError("event and RGB images must be registered to the same size");
  }

  auto encode = [&](Tape::Id t, const std::string& g) {
    for (int l = 0; l < cfg.encoder_layers; ++l) t = self_attention_encode(tape, t, ps, groups::layer(g, l), opt);
    return t;
  };
  auto decode = [&](Tape::Id memory, const std::string& g) {
    Tape::Id q = parameter(tape, ps, groups::kQueries);
    for (int l = 0; l < cfg.decoder_layers; ++l) q = decode_queries(tape, q, memory, ps, groups::layer(g, l), opt);
    return q;
  };
  auto fuse = [&](Tape::Id a, Tape::Id b) {
    switch (cfg.strategy) {
      case Strategy::Pool:
        return pool_fuse(tape, a, b);
      case Strategy::AsymRgbToEv:
        return asymmetric_inject(tape, a, b, ps, groups::kInjectEvent, opt);
      case Strategy::AsymEvToRgb:
        return asymmetric_inject(tape, b, a, ps, groups::kInjectRgb, opt);
      case Strategy::Symmetric:
        return symmetric_fuse(tape, a, b, ps, groups::kInjectEvent, groups::kInjectRgb, opt);
      default:
        throw ConfigError("not a fusion strategy");
    }
  };

  Tape::Id embeddings = -1;
  if (cfg.strategy == Strategy::SingleEvent) {
    embeddings = decode(encode(tokenize(tape, ev, cfg.patch, ps, groups::kTokEvent), groups::kEncEvent),
                        groups::kDecoder);
  } else if (cfg.strategy == Strategy::SingleRgb) {
    embeddings = decode(encode(tokenize(tape, rgb, cfg.patch, ps, groups::kTokRgb), groups::kEncRgb),
                        groups::kDecoder);
  } else {
    const Tape::Id a = tokenize(tape, ev, cfg.patch, ps, groups::kTokEvent);
    const Tape::Id b = tokenize(tape, rgb, cfg.patch, ps, groups::kTokRgb);
    switch (cfg.cutoff) {
      case Cutoff::Backbone:
        embeddings = decode(encode(fuse(a, b), groups::kEncFused), groups::kDecoder);
        break;
      case Cutoff::Encoder:
        embeddings = decode(fuse(encode(a, groups::kEncEvent), encode(b, groups::kEncRgb)), groups::kDecoder);
        break;
      case Cutoff::Decoder:
        embeddings = fuse(decode(encode(a, groups::kEncEvent), groups::kDecEvent),
                          decode(encode(b, groups::kEncRgb), groups::kDecRgb));
        break;
    }
  }
  return predict_heads(tape, embeddings, ps);
}

DetectionSet to_detection_set(const Matrix& head_out) {
  return DetectionSet{head_out.leftCols(2), head_out.rightCols(4)};
}

Matrix head_gradient(const SetLoss& loss) {
  Matrix d(loss.d_probs.rows(), 6);
  d.leftCols(2) = loss.d_probs;
  d.rightCols(4) = loss.d_boxes;
  return d;
}

// ---------------------------------------------------------------------------
// value-level wrappers

TokenSet tokenize(const PlanarImage& img, int patch, ParamStore& ps, const std::string& prefix) {
  Tape t;
  return t.value(tokenize(t, img, patch, ps, prefix));
}

TokenSet self_attention_encode(const TokenSet& x, ParamStore& ps, const std::string& prefix,
                               const AttentionOptions& opt) {
  Tape t;
  const auto in = t.leaf(x);
  return t.value(self_attention_encode(t, in, ps, prefix, opt));
}

TokenSet pool_fuse(const TokenSet& a, const TokenSet& b) {
  Tape t;
  const auto ia = t.leaf(a);
  const auto ib = t.leaf(b);
  return t.value(pool_fuse(t, ia, ib));
}

TokenSet asymmetric_inject(const TokenSet& main, const TokenSet& comp, ParamStore& ps, const std::string& prefix,
                           const AttentionOptions& opt) {
  Tape t;
  const auto im = t.leaf(main);
  const auto ic = t.leaf(comp);
  return t.value(asymmetric_inject(t, im, ic, ps, prefix, opt));
}

TokenSet symmetric_fuse(const TokenSet& a, const TokenSet& b, ParamStore& ps, const std::string& prefix_a,
                        const std::string& prefix_b, const AttentionOptions& opt) {
  Tape t;
  const auto ia = t.leaf(a);
  const auto ib = t.leaf(b);
  return t.value(symmetric_fuse(t, ia, ib, ps, prefix_a, prefix_b, opt));
}

Matrix decode_queries(const Matrix& queries, const TokenSet& fused, ParamStore& ps, const std::string& prefix,
                      const AttentionOptions& opt) {
  Tape t;
  const auto iq = t.leaf(queries);
  const auto im = t.leaf(fused);
  return t.value(decode_queries(t, iq, im, ps, prefix, opt));
}

DetectionSet predict_heads(const Matrix& embeddings, ParamStore& ps) {
  Tape t;
  const auto ie = t.leaf(embeddings);
  return to_detection_set(t.value(predict_heads(t, ie, ps)));
}

DetectionSet forward_detect(const PlanarImage& ev, const PlanarImage& rgb, const FusionConfig& cfg, ParamStore& ps) {
  Tape t;
  return to_detection_set(t.value(forward_detect(t, ev, rgb, cfg, ps)));
}

Matrix attention_weights(const TokenSet& main, const TokenSet& comp, const ParamStore& ps, const std::string& prefix,
                         int heads, int head) {
  const Matrix q = main * ps.value(prefix + ".wq");
  const Matrix k = comp * ps.value(prefix + ".wk");
  const Eigen::Index dh = q.cols() / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  return softmax_rows(q.middleCols(head * dh, dh) * k.middleCols(head * dh, dh).transpose() * scale);
}

}  // namespace nerdd::fusion
