#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "nerdd/matching.hpp"

namespace nerdd::fusion {

using Matrix = Eigen::MatrixXd;
/// N x d spatial tokens.
using TokenSet = Eigen::MatrixXd;

enum class Strategy { SingleEvent, SingleRgb, Pool, AsymRgbToEv, AsymEvToRgb, Symmetric };
enum class Cutoff { Backbone, Encoder, Decoder };

std::string to_string(Strategy s);
std::string to_string(Cutoff c);
Strategy parse_strategy(const std::string& s);
Cutoff parse_cutoff(const std::string& s);
const std::vector<Strategy>& all_strategies();
const std::vector<Cutoff>& all_cutoffs();
bool is_fusion(Strategy s);

struct FusionConfig {
  int d = 64;
  int heads = 1;
  int patch = 16;
  int n_queries = 5;
  Cutoff cutoff = Cutoff::Encoder;
  Strategy strategy = Strategy::Pool;
  int encoder_layers = 1;
  int decoder_layers = 1;
  bool layer_norm = false;
  int event_channels = 2;
  int rgb_channels = 3;
};

/// Throws ConfigError (listing the accepted strategy/cutoff pairs) on invalid settings.
void validate(const FusionConfig& cfg);
std::vector<std::pair<Strategy, Cutoff>> valid_pairs();

/// Planar multi-channel image, values indexed (channel, row, column).
struct PlanarImage {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  PlanarImage() = default;
  PlanarImage(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}
  double& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  double at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
};

/// Named parameter matrices with matching gradient buffers.
class ParamStore {
 public:
  void add(const std::string& name, Matrix init);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  Matrix& value(const std::string& name);
  const Matrix& value(const std::string& name) const;
  Matrix& grad(const std::string& name);
  const Matrix& grad(const std::string& name) const;
  void zero_grad();
  std::vector<std::string> names() const;
  std::size_t parameter_count() const;
  /// Copies every parameter under `from_prefix` onto the same-suffix parameter under `to_prefix`.
  void copy_group(const std::string& from_prefix, const std::string& to_prefix);

 private:
  struct Entry {
    Matrix value;
    Matrix grad;
  };
  std::map<std::string, Entry> entries_;
};

/// Deterministic uniform(-1/sqrt(d), 1/sqrt(d)) initialization of every
/// parameter the configuration uses. Biases start at zero, layer-norm gains at one.
ParamStore init_params(const FusionConfig& cfg, std::uint64_t seed);

void add_attention_params(ParamStore& ps, const std::string& prefix, int d, bool layer_norm,
                          std::uint64_t seed);
void add_head_params(ParamStore& ps, int d, std::uint64_t seed);

// Weights file: "NWT1" | u32 count | {u32 name_len, name, u32 rows, u32 cols, f64 LE * rows*cols} * count
void save_params(const std::string& path, const ParamStore& ps);
/// Overwrites values of `ps` from the file; names and shapes must match exactly.
void load_params(const std::string& path, ParamStore& ps);

/// Reverse-mode record of layer applications. Each recorded node stores its
/// value and an analytic backward rule that accumulates into its inputs and
/// into the ParamStore gradients.
class Tape {
 public:
  using Id = int;
  using Backward = std::function<void(Tape&, const Matrix& d_out)>;

  Id leaf(Matrix value);
  Id record(Matrix value, Backward backward);
  const Matrix& value(Id id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  void accumulate(Id id, const Matrix& d);
  const Matrix& grad(Id id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  /// Runs backward rules from `out` (seeded with `d_out`) down to the leaves.
  void backward(Id out, const Matrix& d_out);
  /// Mixes non-smooth branch decisions (ReLU masks) into a signature so
  /// finite-difference checks can tell when a perturbation crossed a kink.
  void mix_signature(std::uint64_t v) { signature_ = signature_ * 1099511628211ULL ^ v; }
  std::uint64_t signature() const { return signature_; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
  };
  std::vector<Node> nodes_;
  std::uint64_t signature_ = 1469598103934665603ULL;
};

struct AttentionOptions {
  int heads = 1;
  bool layer_norm = false;
};

// Tape-level operations. `prefix` selects the parameter group.
/// Node holding a parameter's value; its gradient flows into the ParamStore.
Tape::Id parameter(Tape& tape, ParamStore& ps, const std::string& name);
Tape::Id tokenize(Tape& tape, const PlanarImage& img, int patch, ParamStore& ps, const std::string& prefix);
Tape::Id cross_attention(Tape& tape, Tape::Id main, Tape::Id comp, ParamStore& ps, const std::string& prefix,
                         const AttentionOptions& opt);
Tape::Id self_attention_encode(Tape& tape, Tape::Id x, ParamStore& ps, const std::string& prefix,
                               const AttentionOptions& opt);
Tape::Id pool_fuse(Tape& tape, Tape::Id a, Tape::Id b);
Tape::Id asymmetric_inject(Tape& tape, Tape::Id main, Tape::Id comp, ParamStore& ps, const std::string& prefix,
                           const AttentionOptions& opt);
Tape::Id symmetric_fuse(Tape& tape, Tape::Id a, Tape::Id b, ParamStore& ps, const std::string& prefix_a,
                        const std::string& prefix_b, const AttentionOptions& opt);
Tape::Id decode_queries(Tape& tape, Tape::Id queries, Tape::Id fused, ParamStore& ps, const std::string& prefix,
                        const AttentionOptions& opt);
/// Output rows are (p_drone, p_no_object, cx, cy, w, h).
Tape::Id predict_heads(Tape& tape, Tape::Id embeddings, ParamStore& ps);
Tape::Id forward_detect(Tape& tape, const PlanarImage& ev, const PlanarImage& rgb, const FusionConfig& cfg,
                        ParamStore& ps);

DetectionSet to_detection_set(const Matrix& head_out);
Matrix head_gradient(const SetLoss& loss);

// Value-level conveniences (no gradients).
TokenSet tokenize(const PlanarImage& img, int patch, ParamStore& ps, const std::string& prefix);
TokenSet self_attention_encode(const TokenSet& x, ParamStore& ps, const std::string& prefix,
                               const AttentionOptions& opt = {});
TokenSet pool_fuse(const TokenSet& a, const TokenSet& b);
TokenSet asymmetric_inject(const TokenSet& main, const TokenSet& comp, ParamStore& ps, const std::string& prefix,
                           const AttentionOptions& opt = {});
TokenSet symmetric_fuse(const TokenSet& a, const TokenSet& b, ParamStore& ps, const std::string& prefix_a,
                        const std::string& prefix_b, const AttentionOptions& opt = {});
Matrix decode_queries(const Matrix& queries, const TokenSet& fused, ParamStore& ps, const std::string& prefix,
                      const AttentionOptions& opt = {});
DetectionSet predict_heads(const Matrix& embeddings, ParamStore& ps);
DetectionSet forward_detect(const PlanarImage& ev, const PlanarImage& rgb, const FusionConfig& cfg, ParamStore& ps);

/// Fixed 2-D sinusoidal positional term for a rows x cols token grid.
Matrix positional_encoding(int rows, int cols, int d);

/// Row-wise softmax.
Matrix softmax_rows(const Matrix& logits);

/// Attention weights of one head for inspection: softmax(Q K^T / sqrt(d_h)).
Matrix attention_weights(const TokenSet& main, const TokenSet& comp, const ParamStore& ps, const std::string& prefix,
                         int heads, int head);

// Parameter group names used by forward_detect.
namespace groups {
inline const std::string kTokEvent = "tok.ev";
inline const std::string kTokRgb = "tok.rgb";
inline const std::string kEncEvent = "enc.ev";
inline const std::string kEncRgb = "enc.rgb";
inline const std::string kEncFused = "enc.fused";
inline const std::string kDecoder = "dec";
inline const std::string kDecEvent = "dec.ev";
inline const std::string kDecRgb = "dec.rgb";
inline const std::string kInjectEvent = "inj.ev";  // event is the main modality
inline const std::string kInjectRgb = "inj.rgb";   // rgb is the main modality
inline const std::string kQueries = "query";
inline const std::string kHead = "head";
std::string layer(const std::string& group, int index);
}  // namespace groups

}  // namespace nerdd::fusion
