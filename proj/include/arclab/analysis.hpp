#pragma once

#include <array>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "arclab/core.hpp"
#include "arclab/gridworld.hpp"
#include "arclab/representations.hpp"

namespace arclab {

struct EigenPairs {
  Vec values;      // descending
  Matrix vectors;  // column j pairs with values[j]
  int sweeps = 0;
};

/// Cyclic Jacobi eigensolver for a real symmetric matrix.
inline EigenPairs jacobi_eigen(const Matrix& input, double tol = 1e-14, int max_sweeps = 100) {
  const std::size_t n = input.rows();
  if (input.cols() != n) throw Error("jacobi_eigen: matrix must be square");
  Matrix a = input;
  Matrix v(n, n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v(i, i) = 1.0;

  auto off_norm = [&]() {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
  };
  double scale = 0.0;
  for (double x : a.data()) scale += x * x;
  scale = std::sqrt(scale);

  int sweep = 0;
  for (; sweep < max_sweeps && off_norm() > tol * std::max(scale, 1e-300); ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });
  EigenPairs out;
  out.sweeps = sweep;
  out.vectors = Matrix(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    out.values.push_back(a(order[j], order[j]));
    // Fix the sign so the largest-magnitude component is positive.
    std::size_t arg = 0;
    for (std::size_t k = 0; k < n; ++k)
      if (std::abs(v(k, order[j])) > std::abs(v(arg, order[j]))) arg = k;
    const double sign = v(arg, order[j]) < 0 ? -1.0 : 1.0;
    for (std::size_t k = 0; k < n; ++k) out.vectors(k, j) = sign * v(k, order[j]);
  }
  return out;
}

/// Torgerson MDS: eigenpairs of -1/2 J D^2 J, coordinates eigvec * sqrt(eigval)
/// with negative eigenvalues truncated to zero.
inline Matrix classical_mds(const Matrix& d, std::size_t out_dim) {
  const std::size_t n = d.rows();
  if (d.cols() != n) throw Error("classical_mds: distance matrix must be square");
  if (n < out_dim) throw Error("classical_mds: fewer points than output dimensions");
  for (std::size_t i = 0; i < n; ++i) {
    if (d(i, i) != 0.0) throw Error("classical_mds: nonzero diagonal");
    for (std::size_t j = 0; j < i; ++j)
      if (std::abs(d(i, j) - d(j, i)) > 1e-12 * std::max(1.0, std::abs(d(i, j))))
        throw Error("classical_mds: distance matrix is not symmetric");
  }
  Matrix b(n, n);
  Vec row_mean(n, 0.0);
  double grand = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double sq = d(i, j) * d(i, j);
      b(i, j) = sq;
      row_mean[i] += sq / static_cast<double>(n);
      grand += sq / static_cast<double>(n * n);
    }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      b(i, j) = -0.5 * (b(i, j) - row_mean[i] - row_mean[j] + grand);
  const EigenPairs eig = jacobi_eigen(b);
  Matrix x(n, out_dim, 0.0);
  for (std::size_t j = 0; j < out_dim; ++j) {
    const double s = std::sqrt(std::max(eig.values[j], 0.0));
    for (std::size_t i = 0; i < n; ++i) x(i, j) = eig.vectors(i, j) * s;
  }
  return x;
}

inline Matrix pairwise_distances(const Matrix& points) {
  const std::size_t n = points.rows();
  Matrix d(n, n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) d(i, j) = d(j, i) = distance(points.row(i), points.row(j));
  return d;
}

/// Kruskal stress-1 of an embedding against a target distance matrix.
inline double stress(const Matrix& target, const Matrix& coords) {
  const Matrix e = pairwise_distances(coords);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < target.rows(); ++i)
    for (std::size_t j = i + 1; j < target.rows(); ++j) {
      num += (target(i, j) - e(i, j)) * (target(i, j) - e(i, j));
      den += target(i, j) * target(i, j);
    }
  return den > 0 ? std::sqrt(num / den) : 0.0;
}

// ---------------------------------------------------------------------------
// Perturbation spread

enum class StateFactor { position, heading };

inline std::string to_string(StateFactor f) {
  return f == StateFactor::position ? "position" : "heading";
}

struct SpreadReport {
  double important_spread = 0.0;
  double secondary_spread = 0.0;
  std::optional<double> ratio;  // empty when secondary_spread == 0
  std::size_t base_states = 0;
  std::string diagnostic;
};

/// States differing from `base` only in `factor`, capped at 8. Heading: all
/// four headings at the base position. Position: the diagonal neighbours at
/// offset `radius` with the base heading.
inline std::vector<StateId> factor_orbit(const GridMdp& mdp, StateId base, StateFactor factor,
                                         int radius) {
  if (!mdp.directed())
    throw Error("perturbation orbit: factor '" + to_string(factor) +
                "' needs a directed grid (position and heading factors)");
  const Cell c = mdp.cell_of(base);
  const Heading h = mdp.heading_of(base);
  std::vector<StateId> orbit;
  if (factor == StateFactor::heading) {
    for (int k = 0; k < 4; ++k) orbit.push_back(*mdp.state_at(c, static_cast<Heading>(k)));
  } else {
    static constexpr std::array<Cell, 4> diag = {{{-1, -1}, {1, -1}, {-1, 1}, {1, 1}}};
    for (Cell dlt : diag)
      if (auto s = mdp.state_at({c.x + radius * dlt.x, c.y + radius * dlt.y}, h)) orbit.push_back(*s);
  }
  return orbit;
}

inline double mean_pairwise_latent_distance(const Encoder& enc, const GridMdp& mdp,
                                            std::span<const StateId> states) {
  if (states.size() < 2) return 0.0;
  std::vector<Vec> z;
  for (StateId s : states) z.push_back(enc.encode_state(mdp, s));
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < z.size(); ++i)
    for (std::size_t j = i + 1; j < z.size(); ++j) {
      total += distance(z[i], z[j]);
      ++n;
    }
  return total / static_cast<double>(n);
}

inline SpreadReport perturbation_spread(const Encoder& enc, const GridMdp& mdp,
                                        std::span<const StateId> base_states,
                                        StateFactor important, StateFactor secondary,
                                        int radius) {
  if (important == secondary) throw Error("perturbation_spread: factors must differ");
  SpreadReport r;
  for (StateId b : base_states) {
    const auto oi = factor_orbit(mdp, b, important, radius);
    const auto os = factor_orbit(mdp, b, secondary, radius);
    if (oi.size() < 2 || os.size() < 2) continue;
    r.important_spread += mean_pairwise_latent_distance(enc, mdp, oi);
    r.secondary_spread += mean_pairwise_latent_distance(enc, mdp, os);
    ++r.base_states;
  }
  if (r.base_states == 0) throw Error("perturbation_spread: no base state has complete orbits");
  r.important_spread /= static_cast<double>(r.base_states);
  r.secondary_spread /= static_cast<double>(r.base_states);
  if (r.secondary_spread > 0.0)
    r.ratio = r.important_spread / r.secondary_spread;
  else
    r.diagnostic = "secondary spread is zero; ratio undefined";
  return r;
}

inline std::string spread_csv(const SpreadReport& r, const std::string& label) {
  return "representation,important_spread,secondary_spread,ratio,base_states\n" + label + "," +
         format_double(r.important_spread) + "," + format_double(r.secondary_spread) + "," +
         (r.ratio ? format_double(*r.ratio) : std::string("nan")) + "," +
         std::to_string(r.base_states) + "\n";
}

// ---------------------------------------------------------------------------
// Wall separation

struct SeparationReport {
  double cross_mean = 0.0;  // mean latent distance of pairs straddling a wall cell
  double open_mean = 0.0;   // mean latent distance of equally spaced pairs with no wall between
  double ratio = 0.0;
  std::size_t cross_pairs = 0;
  std::size_t open_pairs = 0;
};

/// Horizontal pairs (x-1,y),(x+1,y) around a wall cell (x,y).
inline std::vector<std::pair<StateId, StateId>> wall_cross_pairs(const GridMdp& mdp) {
  std::vector<std::pair<StateId, StateId>> out;
  for (const Cell& w : mdp.spec().walls) {
    auto a = mdp.state_at({w.x - 1, w.y});
    auto b = mdp.state_at({w.x + 1, w.y});
    if (a && b) out.emplace_back(*a, *b);
  }
  return out;
}

/// Horizontal pairs (x,y),(x+2,y) whose three columns contain no wall at all.
inline std::vector<std::pair<StateId, StateId>> wall_open_pairs(const GridMdp& mdp) {
  std::set<int> wall_cols;
  for (const Cell& w : mdp.spec().walls) wall_cols.insert(w.x);
  std::vector<std::pair<StateId, StateId>> out;
  for (int y = 0; y < mdp.height(); ++y)
    for (int x = 0; x + 2 < mdp.width(); ++x) {
      if (wall_cols.count(x) || wall_cols.count(x + 1) || wall_cols.count(x + 2)) continue;
      auto a = mdp.state_at({x, y});
      auto b = mdp.state_at({x + 2, y});
      if (a && b) out.emplace_back(*a, *b);
    }
  return out;
}

inline SeparationReport wall_separation(const Encoder& enc, const GridMdp& mdp) {
  SeparationReport r;
  const auto cross = wall_cross_pairs(mdp);
  const auto open = wall_open_pairs(mdp);
  if (cross.empty() || open.empty()) throw Error("wall separation: environment lacks wall or open pairs");
  for (auto [a, b] : cross) r.cross_mean += distance(enc.encode_state(mdp, a), enc.encode_state(mdp, b));
  for (auto [a, b] : open) r.open_mean += distance(enc.encode_state(mdp, a), enc.encode_state(mdp, b));
  r.cross_pairs = cross.size();
  r.open_pairs = open.size();
  r.cross_mean /= static_cast<double>(cross.size());
  r.open_mean /= static_cast<double>(open.size());
  if (!(r.open_mean > 0.0)) throw NumericError("wall separation: open pairs collapse to a point");
  r.ratio = r.cross_mean / r.open_mean;
  return r;
}

// ---------------------------------------------------------------------------
// Scatter export

enum class ColorBy { x, y, room };

inline ColorBy color_by_from_string(const std::string& s) {
  if (s == "x") return ColorBy::x;
  if (s == "y") return ColorBy::y;
  if (s == "room") return ColorBy::room;
  throw ConfigError("unknown color attribute '" + s + "'");
}

/// Every state embedded in 2-D: latents of dim 2 as-is, dim 3 projected by MDS.
inline Matrix scatter_coordinates(const Encoder& enc, const GridMdp& mdp) {
  std::vector<StateId> states(mdp.num_states());
  std::iota(states.begin(), states.end(), StateId{0});
  Matrix z = enc.embed(mdp, states);
  if (z.cols() == 2) return z;
  if (z.cols() == 3) return classical_mds(pairwise_distances(z), 2);
  throw Error("export_scatter: latent dimension must be 2 or 3");
}

inline std::string scatter_svg(const Matrix& xy, const GridMdp& mdp, ColorBy color_by) {
  static constexpr std::array<const char*, 8> palette = {
      "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"};
  const double size = 400.0, pad = 20.0;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (std::size_t i = 0; i < xy.rows(); ++i) {
    xmin = std::min(xmin, xy(i, 0));
    xmax = std::max(xmax, xy(i, 0));
    ymin = std::min(ymin, xy(i, 1));
    ymax = std::max(ymax, xy(i, 1));
  }
  const double span = std::max({xmax - xmin, ymax - ymin, 1e-12});
  auto fmt = [](double v) {
    std::ostringstream os;
    os.imbue(std::locale::classic());
    os.setf(std::ios::fixed);
    os.precision(3);
    os << v;
    return os.str();
  };
  std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(size + 2 * pad) +
                    "\" height=\"" + fmt(size + 2 * pad) + "\">\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t i = 0; i < xy.rows(); ++i) {
    const Cell c = mdp.cell_of(i);
    std::string color;
    if (color_by == ColorBy::room) {
      color = palette[static_cast<std::size_t>(mdp.room_of(i)) % palette.size()];
    } else {
      const double t = color_by == ColorBy::x
                           ? (mdp.width() > 1 ? static_cast<double>(c.x) / (mdp.width() - 1) : 0.0)
                           : (mdp.height() > 1 ? static_cast<double>(c.y) / (mdp.height() - 1) : 0.0);
      const int r = static_cast<int>(std::lround(255 * t));
      const int b = 255 - r;
      color = "rgb(" + std::to_string(r) + ",64," + std::to_string(b) + ")";
    }
    const double px = pad + (xy(i, 0) - xmin) / span * size;
    const double py = pad + (xy(i, 1) - ymin) / span * size;
    out += "<circle cx=\"" + fmt(px) + "\" cy=\"" + fmt(py) + "\" r=\"4\" fill=\"" + color +
           "\"><title>state " + std::to_string(i) + " " + GridMdp::describe(c) + "</title></circle>\n";
  }
  out += "</svg>\n";
  return out;
}

inline void export_scatter(const Encoder& enc, const GridMdp& mdp, ColorBy color_by,
                           const std::string& path) {
  if (color_by == ColorBy::room && !mdp.has_rooms())
    throw Error("export_scatter: environment has no room labels");
  write_text_file(path, scatter_svg(scatter_coordinates(enc, mdp), mdp, color_by));
}

/// state_index,x,y,features...,z_1..z_d
inline std::string embedding_csv(const Encoder& enc, const GridMdp& mdp) {
  std::string out = "state_index,x,y";
  for (std::size_t i = 0; i < mdp.feature_dim(); ++i) out += ",f_" + std::to_string(i + 1);
  for (std::size_t i = 0; i < enc.latent_dim(); ++i) out += ",z_" + std::to_string(i + 1);
  out += "\n";
  for (StateId s = 0; s < mdp.num_states(); ++s) {
    const Cell c = mdp.cell_of(s);
    out += std::to_string(s) + "," + std::to_string(c.x) + "," + std::to_string(c.y);
    const Vec f = mdp.features(s);
    for (double v : f) out += "," + format_double(v);
    for (double v : enc.encode(f)) out += "," + format_double(v);
    out += "\n";
  }
  return out;
}

}  // namespace arclab
