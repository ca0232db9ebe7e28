#include "nerdd/matching.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>

#include "nerdd/errors.hpp"

namespace nerdd {

namespace {

void check_finite(const CostMatrix& c) {
  for (Eigen::Index i = 0; i < c.rows(); ++i) {
    for (Eigen::Index j = 0; j < c.cols(); ++j) {
      if (std::isnan(c(i, j))) throw NumericError("cost matrix contains NaN");
      if (!std::isfinite(c(i, j))) throw NumericError("cost matrix contains an infinite entry");
    }
  }
}

// Shortest augmenting path with potentials on a square matrix. Returns the
// column for each row and leaves the dual potentials in u, v so that
// a(i, j) - u[i] - v[j] >= 0 with equality on the matching.
std::vector<int> solve_square(const Eigen::MatrixXd& a, std::vector<double>& u, std::vector<double>& v) {
  const int n = static_cast<int>(a.rows());
  const double inf = std::numeric_limits<double>::infinity();
  u.assign(n + 1, 0.0);
  v.assign(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= n; ++j) row_to_col[p[j] - 1] = j - 1;
  // shift to 0-based potentials
  u.erase(u.begin());
  v.erase(v.begin());
  return row_to_col;
}

// Among all optimal matchings (perfect matchings of the zero-reduced-cost
// subgraph) pick the one whose row -> column sequence is lexicographically smallest.
void lexicographic_tie_break(const Eigen::MatrixXd& a, const std::vector<double>& u,
                             const std::vector<double>& v, std::vector<int>& row_to_col) {
  const int n = static_cast<int>(a.rows());
  const double eps = 1e-9 * (1.0 + a.cwiseAbs().maxCoeff());
  auto tight = [&](int i, int j) { return a(i, j) - u[i] - v[j] <= eps; };
  std::vector<int> col_to_row(n);
  for (int i = 0; i < n; ++i) col_to_row[row_to_col[i]] = i;

  std::vector<char> visited(n);
  for (int i = 0; i < n; ++i) {
    const int freed = row_to_col[i];
    for (int j = 0; j < freed; ++j) {
      if (!tight(i, j) || col_to_row[j] < i) continue;
      // row r currently owns j; look for an alternating path from r that ends at `freed`
      std::fill(visited.begin(), visited.end(), 0);
      visited[j] = 1;
      std::vector<std::pair<int, int>> path;
      std::function<bool(int)> dfs = [&](int r) -> bool {
        for (int c = 0; c < n; ++c) {
          if (visited[c] || !tight(r, c)) continue;
          visited[c] = 1;
          if (c == freed) {
            path.emplace_back(r, c);
            return true;
          }
          const int next = col_to_row[c];
          if (next < i) continue;  // rows before i are fixed
          if (dfs(next)) {
            path.emplace_back(r, c);
            return true;
          }
        }
        return false;
      };
      if (dfs(col_to_row[j])) {
        for (auto [r, c] : path) {
          row_to_col[r] = c;
          col_to_row[c] = r;
        }
        row_to_col[i] = j;
        col_to_row[j] = i;
        break;
      }
    }
  }
}

double cross_entropy_term(double p, double weight, double& d_p) {
  constexpr double kFloor = 1e-300;
  if (p <= kFloor) {
    d_p = 0;
    return -weight * std::log(kFloor);
  }
  d_p = -weight / p;
  return -weight * std::log(p);
}

}  // namespace

Assignment hungarian(const CostMatrix& cost) {
  check_finite(cost);
  Assignment out;
  const auto rows = static_cast<int>(cost.rows());
  const auto cols = static_cast<int>(cost.cols());
  if (rows == 0 || cols == 0) return out;

  const int n = std::max(rows, cols);
  const double sentinel = cost.cwiseAbs().maxCoeff() + 1.0;
  Eigen::MatrixXd square = Eigen::MatrixXd::Constant(n, n, sentinel);
  square.topLeftCorner(rows, cols) = cost;

  std::vector<double> u, v;
  auto row_to_col = solve_square(square, u, v);
  lexicographic_tie_break(square, u, v, row_to_col);

  for (int i = 0; i < rows; ++i) {
    const int j = row_to_col[i];
    if (j < cols) {
      out.pairs.emplace_back(i, j);
      out.cost += cost(i, j);
    }
  }
  return out;
}

Assignment brute_force_assignment(const CostMatrix& cost) {
  check_finite(cost);
  Assignment best;
  const auto rows = static_cast<int>(cost.rows());
  const auto cols = static_cast<int>(cost.cols());
  if (rows == 0 || cols == 0) return best;
  const int n = std::max(rows, cols);
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  bool first = true;
  do {
    double total = 0;
    for (int i = 0; i < rows; ++i) {
      if (perm[i] < cols) total += cost(i, perm[i]);
    }
    if (first || total < best.cost) {
      first = false;
      best.cost = total;
      best.pairs.clear();
      for (int i = 0; i < rows; ++i) {
        if (perm[i] < cols) best.pairs.emplace_back(i, perm[i]);
      }
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

CostMatrix match_cost(const DetectionSet& pred, std::span<const CenterBox> gt, const LossWeights& w) {
  for (const auto& g : gt) {
    for (double c : {g.cx, g.cy, g.w, g.h}) {
      if (!(c >= 0.0 && c <= 1.0)) throw InputError("ground-truth box not normalized to [0, 1]");
    }
  }
  const Eigen::Index nq = pred.size();
  const auto m = static_cast<Eigen::Index>(gt.size());
  CostMatrix c(nq, m);
  for (Eigen::Index i = 0; i < nq; ++i) {
    const CenterBox b = pred.box(i);
    for (Eigen::Index j = 0; j < m; ++j) {
      const CenterBox& g = gt[static_cast<std::size_t>(j)];
      const double l1 = std::abs(b.cx - g.cx) + std::abs(b.cy - g.cy) + std::abs(b.w - g.w) + std::abs(b.h - g.h);
      c(i, j) = -w.cls * pred.probs(i, kDroneClass) + w.l1 * l1 +
                w.giou * (1.0 - giou(to_corner(b), to_corner(g)));
    }
  }
  return c;
}

SetLoss set_loss(const DetectionSet& pred, std::span<const CenterBox> gt, const Assignment& assignment,
                 const LossWeights& w) {
  const Eigen::Index nq = pred.size();
  const auto m = static_cast<Eigen::Index>(gt.size());
  if (pred.probs.cols() != 2 || pred.boxes.cols() != 4 || pred.boxes.rows() != nq) {
    throw ContractError("detection set has inconsistent shapes");
  }
  if (static_cast<Eigen::Index>(assignment.pairs.size()) != std::min(nq, m)) {
    throw ContractError("assignment size must equal min(queries, ground truth)");
  }
  std::vector<int> matched(static_cast<std::size_t>(nq), -1);
  std::vector<char> gt_used(static_cast<std::size_t>(m), 0);
  for (auto [i, j] : assignment.pairs) {
    if (i < 0 || i >= nq || j < 0 || j >= m) throw ContractError("assignment index out of range");
    if (matched[i] != -1 || gt_used[j]) throw ContractError("assignment is not injective");
    matched[i] = j;
    gt_used[j] = 1;
  }

  SetLoss out;
  out.d_probs = Eigen::MatrixXd::Zero(nq, 2);
  out.d_boxes = Eigen::MatrixXd::Zero(nq, 4);
  for (Eigen::Index i = 0; i < nq; ++i) {
    if (matched[i] < 0) {
      out.value += cross_entropy_term(pred.probs(i, kNoObjectClass), w.no_object, out.d_probs(i, kNoObjectClass));
      continue;
    }
    out.value += cross_entropy_term(pred.probs(i, kDroneClass), w.cls, out.d_probs(i, kDroneClass));
    const CenterBox b = pred.box(i);
    const CenterBox& g = gt[static_cast<std::size_t>(matched[i])];
    const double diff[4] = {b.cx - g.cx, b.cy - g.cy, b.w - g.w, b.h - g.h};
    for (int k = 0; k < 4; ++k) {
      out.value += w.l1 * std::abs(diff[k]);
      out.d_boxes(i, k) += w.l1 * (diff[k] > 0 ? 1.0 : diff[k] < 0 ? -1.0 : 0.0);
    }
    const GiouWithGrad gg = giou_grad(b, g);
    out.value += w.giou * (1.0 - gg.value);
    for (int k = 0; k < 4; ++k) out.d_boxes(i, k) -= w.giou * gg.d_a[k];
  }
  return out;
}

SetLoss matched_set_loss(const DetectionSet& pred, std::span<const CenterBox> gt, const LossWeights& w,
                         Assignment* assignment_out) {
  const Assignment a = hungarian(match_cost(pred, gt, w));
  if (assignment_out) *assignment_out = a;
  return set_loss(pred, gt, a, w);
}

}  // namespace nerdd
