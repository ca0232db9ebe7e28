#include "nerdd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "nerdd/errors.hpp"
#include "nerdd/fusion.hpp"

namespace nerdd::fusion {

namespace {

constexpr int kWidth = 8;

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  double uniform(double lo, double hi) { return lo + (hi - lo) * static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
  Matrix matrix(int rows, int cols, double lo, double hi) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(lo, hi);
    return m;
  }

 private:
  std::mt19937_64 gen_;
};

using Objective = std::function<double(ParamStore&, bool backward, std::uint64_t& signature)>;

struct Scenario {
  ParamStore ps;
  Objective objective;
};

std::uint64_t mix(std::uint64_t h, std::uint64_t v) { return (h ^ v) * 1099511628211ULL; }

// Records which side of each non-smooth point (|.|, min, max) the loss sits on.
std::uint64_t set_loss_signature(const DetectionSet& det, const std::vector<CenterBox>& gt, const Assignment& a) {
  std::uint64_t h = 1469598103934665603ULL;
  for (auto [i, j] : a.pairs) {
    const CenterBox b = det.box(i);
    const CenterBox& g = gt[static_cast<std::size_t>(j)];
    const Box p = to_corner(b);
    const Box q = to_corner(g);
    const double diffs[4] = {b.cx - g.cx, b.cy - g.cy, b.w - g.w, b.h - g.h};
    for (double d : diffs) h = mix(h, d > 0 ? 1 : d < 0 ? 2 : 3);
    h = mix(h, p.x < q.x);
    h = mix(h, p.y < q.y);
    h = mix(h, p.right() < q.right());
    h = mix(h, p.bottom() < q.bottom());
    h = mix(h, std::min(p.right(), q.right()) > std::max(p.x, q.x));
    h = mix(h, std::min(p.bottom(), q.bottom()) > std::max(p.y, q.y));
  }
  return h;
}

std::vector<CenterBox> random_gt(Rng& rng, int count) {
  std::vector<CenterBox> gt;
  for (int k = 0; k < count; ++k) {
    gt.push_back({rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4)});
  }
  return gt;
}

// Scalar objective sum(R .* out) over a token-valued op.
Scenario token_scenario(ParamStore ps, Rng& rng, int out_rows,
                        std::function<Tape::Id(Tape&, ParamStore&)> build) {
  const Matrix weights = rng.matrix(out_rows, kWidth, -1.0, 1.0);
  Scenario s;
  s.ps = std::move(ps);
  s.objective = [weights, build](ParamStore& ps, bool backward, std::uint64_t& sig) {
    Tape tape;
    const Tape::Id out = build(tape, ps);
    const double value = tape.value(out).cwiseProduct(weights).sum();
    if (backward) tape.backward(out, weights);
    sig = tape.signature();
    return value;
  };
  return s;
}

PlanarImage random_image(Rng& rng, int channels, int height, int width) {
  PlanarImage img(channels, height, width);
  for (auto& v : img.data) v = rng.uniform(0.0, 1.0);
  return img;
}

Scenario make_scenario(const std::string& op, std::uint64_t seed) {
  Rng rng(seed);
  ParamStore ps;
  const AttentionOptions single{1, false};
  const int n = 5;

  if (op == "pool_fuse") {
    ps.add("input.a", rng.matrix(n, kWidth, -1, 1));
    ps.add("input.b", rng.matrix(n, kWidth, -1, 1));
    return token_scenario(std::move(ps), rng, n, [](Tape& t, ParamStore& p) {
      return pool_fuse(t, parameter(t, p, "input.a"), parameter(t, p, "input.b"));
    });
  }
  if (op == "asymmetric_inject") {
    ps.add("input.main", rng.matrix(n, kWidth, -1, 1));
    ps.add("input.comp", rng.matrix(n, kWidth, -1, 1));
    add_attention_params(ps, "inj", kWidth, false, seed);
    return token_scenario(std::move(ps), rng, n, [single](Tape& t, ParamStore& p) {
      return asymmetric_inject(t, parameter(t, p, "input.main"), parameter(t, p, "input.comp"), p, "inj", single);
    });
  }
  if (op == "symmetric_fuse") {
    ps.add("input.a", rng.matrix(n, kWidth, -1, 1));
    ps.add("input.b", rng.matrix(n, kWidth, -1, 1));
    add_attention_params(ps, "inj.a", kWidth, false, seed);
    add_attention_params(ps, "inj.b", kWidth, false, seed);
    return token_scenario(std::move(ps), rng, n, [single](Tape& t, ParamStore& p) {
      return symmetric_fuse(t, parameter(t, p, "input.a"), parameter(t, p, "input.b"), p, "inj.a", "inj.b", single);
    });
  }
  if (op == "self_attention_encode") {
    // two heads and layer normalization exercise the optional branches
    ps.add("input.x", rng.matrix(6, kWidth, -1, 1));
    add_attention_params(ps, "enc", kWidth, true, seed);
    ps.value("enc.ln_g") = rng.matrix(1, kWidth, 0.5, 1.5);
    ps.value("enc.ln_b") = rng.matrix(1, kWidth, -0.5, 0.5);
    return token_scenario(std::move(ps), rng, 6, [](Tape& t, ParamStore& p) {
      return self_attention_encode(t, parameter(t, p, "input.x"), p, "enc", AttentionOptions{2, true});
    });
  }
  if (op == "decode_queries") {
    ps.add("input.queries", rng.matrix(4, kWidth, -1, 1));
    ps.add("input.fused", rng.matrix(6, kWidth, -1, 1));
    add_attention_params(ps, "dec", kWidth, false, seed);
    return token_scenario(std::move(ps), rng, 4, [single](Tape& t, ParamStore& p) {
      return decode_queries(t, parameter(t, p, "input.queries"), parameter(t, p, "input.fused"), p, "dec", single);
    });
  }
  if (op == "tokenize") {
    const PlanarImage img = random_image(rng, 3, 8, 12);
    ps.add("tok.w", rng.matrix(3 * 16, kWidth, -0.3, 0.3));
    ps.add("tok.b", rng.matrix(1, kWidth, -0.3, 0.3));
    return token_scenario(std::move(ps), rng, 6,
                          [img](Tape& t, ParamStore& p) { return tokenize(t, img, 4, p, "tok"); });
  }
  if (op == "predict_heads") {
    ps.add("input.e", rng.matrix(5, kWidth, -1, 1));
    add_head_params(ps, kWidth, seed);
    Matrix weights = rng.matrix(5, 6, -1, 1);
    Scenario s;
    s.ps = std::move(ps);
    s.objective = [weights](ParamStore& p, bool backward, std::uint64_t& sig) {
      Tape tape;
      const Tape::Id out = predict_heads(tape, parameter(tape, p, "input.e"), p);
      const double value = tape.value(out).cwiseProduct(weights).sum();
      if (backward) tape.backward(out, weights);
      sig = tape.signature();
      return value;
    };
    return s;
  }
  if (op == "set_loss") {
    const int nq = 5;
    Matrix probs(nq, 2);
    for (int i = 0; i < nq; ++i) {
      const double p = rng.uniform(0.2, 0.8);
      probs(i, 0) = p;
      probs(i, 1) = 1 - p;
    }
    ps.add("input.probs", probs);
    ps.add("input.boxes", rng.matrix(nq, 4, 0.15, 0.6));
    const auto gt = random_gt(rng, 3);
    const DetectionSet base{ps.value("input.probs"), ps.value("input.boxes")};
    const Assignment assignment = hungarian(match_cost(base, gt));
    Scenario s;
    s.ps = std::move(ps);
    s.objective = [gt, assignment](ParamStore& p, bool backward, std::uint64_t& sig) {
      const DetectionSet det{p.value("input.probs"), p.value("input.boxes")};
      const SetLoss sl = set_loss(det, gt, assignment);
      if (backward) {
        p.grad("input.probs") += sl.d_probs;
        p.grad("input.boxes") += sl.d_boxes;
      }
      sig = set_loss_signature(det, gt, assignment);
      return sl.value;
    };
    return s;
  }
  if (op.rfind("forward_detect", 0) == 0) {
    FusionConfig cfg;
    cfg.d = kWidth;
    cfg.patch = 4;
    cfg.n_queries = 4;
    cfg.strategy = Strategy::Symmetric;
    cfg.cutoff = Cutoff::Encoder;
    if (op.size() > std::string("forward_detect").size()) {
      const auto colon = op.find(':');
      const auto at = op.find('@');
      if (colon == std::string::npos || at == std::string::npos || at < colon) {
        throw ConfigError("expected forward_detect:<strategy>@<cutoff>, got '" + op + "'");
      }
      cfg.strategy = parse_strategy(op.substr(colon + 1, at - colon - 1));
      cfg.cutoff = parse_cutoff(op.substr(at + 1));
    }
    ParamStore params = init_params(cfg, seed);
    const PlanarImage ev = random_image(rng, cfg.event_channels, 8, 12);
    const PlanarImage rgb = random_image(rng, cfg.rgb_channels, 8, 12);
    const auto gt = random_gt(rng, 2);
    const Assignment assignment = hungarian(match_cost(forward_detect(ev, rgb, cfg, params), gt));
    Scenario s;
    s.ps = std::move(params);
    s.objective = [cfg, ev, rgb, gt, assignment](ParamStore& p, bool backward, std::uint64_t& sig) {
      Tape tape;
      const Tape::Id out = forward_detect(tape, ev, rgb, cfg, p);
      const DetectionSet det = to_detection_set(tape.value(out));
      const SetLoss sl = set_loss(det, gt, assignment);
      if (backward) tape.backward(out, head_gradient(sl));
      sig = mix(tape.signature(), set_loss_signature(det, gt, assignment));
      return sl.value;
    };
    return s;
  }
  throw ConfigError("unknown grad-check op '" + op + "'");
}

}  // namespace

const std::vector<std::string>& grad_check_ops() {
  static const std::vector<std::string> ops{"pool_fuse",      "asymmetric_inject", "symmetric_fuse",
                                            "self_attention_encode", "decode_queries", "predict_heads",
                                            "tokenize",       "set_loss",          "forward_detect"};
  return ops;
}

GradCheckResult grad_check(const std::string& op, std::uint64_t seed, const GradCheckOptions& opt) {
  Scenario s = make_scenario(op, seed);
  ParamStore& ps = s.ps;
  GradCheckResult result;
  result.op = op;

  std::uint64_t base_sig = 0;
  ps.zero_grad();
  s.objective(ps, true, base_sig);

  for (const auto& name : ps.names()) {
    const Matrix analytic = ps.grad(name);
    Matrix& value = ps.value(name);
    for (Eigen::Index k = 0; k < value.size(); ++k) {
      const double original = value.data()[k];
      double h = opt.step;
      bool clean = false;
      double fp = 0, fm = 0;
      for (int attempt = 0; attempt < 4 && !clean; ++attempt) {
        std::uint64_t sig_p = 0, sig_m = 0;
        value.data()[k] = original + h;
        fp = s.objective(ps, false, sig_p);
        value.data()[k] = original - h;
        fm = s.objective(ps, false, sig_m);
        value.data()[k] = original;
        clean = sig_p == base_sig && sig_m == base_sig;
        if (!clean) {
          if (attempt == 0) ++result.reduced_steps;
          h /= 10;
        }
      }
      if (!clean) {
        ++result.skipped;
        continue;
      }
      const double numeric = (fp - fm) / (2 * h);
      const double a = analytic.data()[k];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), opt.denominator_floor});
      ++result.coordinates;
      result.max_abs_error = std::max(result.max_abs_error, abs_err);
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_param = name;
      }
    }
  }
  return result;
}

}  // namespace nerdd::fusion
