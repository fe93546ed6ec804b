#pragma once

#include <array>
#include <compare>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <vector>

#include "arclab/core.hpp"

namespace arclab {

struct Cell {
  int x = 0;
  int y = 0;
  auto operator<=>(const Cell&) const = default;
};

// Headings in clockwise order; y grows downward (row 0 is the top row).
enum class Heading : int { north = 0, east = 1, south = 2, west = 3 };

inline constexpr std::array<Cell, 4> kHeadingStep = {{{0, -1}, {1, 0}, {0, 1}, {-1, 0}}};

/// Plain grids: up, down, left, right. Directed grids: forward, turn-left, turn-right.
enum class PlainAction : int { up = 0, down = 1, left = 2, right = 3 };
enum class DirectedAction : int { forward = 0, turn_left = 1, turn_right = 2 };

struct GridSpec {
  int width = 0;
  int height = 0;
  std::set<Cell> walls;
  std::set<Cell> doorways;
  bool directed = false;
};

/// Placement of a grid inside a (possibly larger) reference frame. Features
/// are scaled by the frame extents so encoders trained on a sub-region see
/// consistent coordinates when applied to the full region.
struct FeatureFrame {
  int origin_x = 0;
  int origin_y = 0;
  int extent_width = 0;   // 0: use the grid's own width
  int extent_height = 0;  // 0: use the grid's own height
};

class GridMdp {
public:
  static GridMdp build(GridSpec spec, std::string name = "custom") {
    GridMdp m;
    m.name_ = std::move(name);
    m.spec_ = std::move(spec);
    m.init();
    return m;
  }

  const std::string& name() const noexcept { return name_; }
  const GridSpec& spec() const noexcept { return spec_; }
  int width() const noexcept { return spec_.width; }
  int height() const noexcept { return spec_.height; }
  bool directed() const noexcept { return spec_.directed; }

  std::size_t num_states() const noexcept { return cell_of_.size(); }
  std::size_t num_actions() const noexcept { return spec_.directed ? 3 : 4; }
  std::size_t num_cells() const noexcept { return free_cells_.size(); }

  StateId transition(StateId s, ActionId a) const {
    if (s >= num_states() || a >= num_actions())
      throw Error("transition: id out of range (s=" + std::to_string(s) +
                  ", a=" + std::to_string(a) + ")");
    return next_[s * num_actions() + a];
  }

  Cell cell_of(StateId s) const { return cell_of_.at(s); }
  Heading heading_of(StateId s) const {
    return spec_.directed ? static_cast<Heading>(s % 4) : Heading::north;
  }

  bool is_free(Cell c) const {
    return in_bounds(c) && cell_index_[index(c)] >= 0;
  }

  std::optional<StateId> state_at(Cell c, Heading h = Heading::north) const {
    if (!is_free(c)) return std::nullopt;
    const auto ci = static_cast<StateId>(cell_index_[index(c)]);
    return spec_.directed ? ci * 4 + static_cast<StateId>(h) : ci;
  }

  // Features -----------------------------------------------------------------

  std::size_t feature_dim() const noexcept { return spec_.directed ? 6 : 2; }

  const FeatureFrame& feature_frame() const noexcept { return frame_; }

  GridMdp with_feature_frame(FeatureFrame frame) const {
    GridMdp copy = *this;
    copy.frame_ = frame;
    return copy;
  }

  Vec features(StateId s) const {
    const Cell c = cell_of(s);
    const int ew = frame_.extent_width > 0 ? frame_.extent_width : spec_.width;
    const int eh = frame_.extent_height > 0 ? frame_.extent_height : spec_.height;
    Vec f(feature_dim(), 0.0);
    f[0] = ew > 1 ? static_cast<double>(c.x + frame_.origin_x) / (ew - 1) : 0.0;
    f[1] = eh > 1 ? static_cast<double>(c.y + frame_.origin_y) / (eh - 1) : 0.0;
    if (spec_.directed) f[2 + static_cast<std::size_t>(heading_of(s))] = 1.0;
    return f;
  }

  // Rooms --------------------------------------------------------------------

  bool has_rooms() const noexcept { return !room_of_.empty(); }
  int num_rooms() const noexcept { return num_rooms_; }
  int room_of(StateId s) const {
    if (room_of_.empty()) throw Error("room_of: environment has no room labels");
    return room_of_.at(spec_.directed ? s / 4 : s);
  }

  // Assign room labels by flood fill over non-doorway free cells. Doorways
  // join the lowest-indexed adjacent room. Rooms are numbered by the
  // row-major order of their first cell.
  void label_rooms() {
    std::vector<int> label(free_cells_.size(), -1);
    int next = 0;
    for (std::size_t i = 0; i < free_cells_.size(); ++i) {
      if (label[i] >= 0 || spec_.doorways.count(free_cells_[i])) continue;
      std::queue<std::size_t> q;
      q.push(i);
      label[i] = next;
      while (!q.empty()) {
        const Cell c = free_cells_[q.front()];
        q.pop();
        for (Cell d : kHeadingStep) {
          const Cell n{c.x + d.x, c.y + d.y};
          if (!is_free(n) || spec_.doorways.count(n)) continue;
          const auto ni = static_cast<std::size_t>(cell_index_[index(n)]);
          if (label[ni] < 0) {
            label[ni] = next;
            q.push(ni);
          }
        }
      }
      ++next;
    }
    for (std::size_t i = 0; i < free_cells_.size(); ++i) {
      if (label[i] >= 0) continue;
      int best = -1;
      const Cell c = free_cells_[i];
      for (Cell d : kHeadingStep) {
        const Cell n{c.x + d.x, c.y + d.y};
        if (!is_free(n) || spec_.doorways.count(n)) continue;
        const int l = label[static_cast<std::size_t>(cell_index_[index(n)])];
        if (l >= 0 && (best < 0 || l < best)) best = l;
      }
      if (best < 0) throw Error("doorway " + describe(c) + " touches no room");
      label[i] = best;
    }
    room_of_ = std::move(label);
    num_rooms_ = next;
  }

  // Export -------------------------------------------------------------------

  /// Rows of '.', '#', 'D' (doorway), top row first.
  std::string ascii() const {
    std::string out;
    for (int y = 0; y < spec_.height; ++y) {
      for (int x = 0; x < spec_.width; ++x) {
        const Cell c{x, y};
        out += spec_.walls.count(c) ? '#' : spec_.doorways.count(c) ? 'D' : '.';
      }
      out += '\n';
    }
    return out;
  }

  /// Content hash of the dynamics and feature frame.
  std::uint64_t hash() const {
    std::string key = ascii();
    key += spec_.directed ? "directed" : "plain";
    key += ":" + std::to_string(frame_.origin_x) + "," + std::to_string(frame_.origin_y) +
           "," + std::to_string(frame_.extent_width) + "," +
           std::to_string(frame_.extent_height);
    return fnv1a(key);
  }

  /// Breadth-first action distances from `from` to every state.
  std::vector<int> bfs_distances(StateId from) const {
    std::vector<int> dist(num_states(), -1);
    std::queue<StateId> q;
    dist[from] = 0;
    q.push(from);
    while (!q.empty()) {
      const StateId s = q.front();
      q.pop();
      for (ActionId a = 0; a < num_actions(); ++a) {
        const StateId n = next_[s * num_actions() + a];
        if (dist[n] < 0) {
          dist[n] = dist[s] + 1;
          q.push(n);
        }
      }
    }
    return dist;
  }

  static std::string describe(Cell c) {
    return "(" + std::to_string(c.x) + "," + std::to_string(c.y) + ")";
  }

private:
  GridMdp() = default;

  bool in_bounds(Cell c) const {
    return c.x >= 0 && c.y >= 0 && c.x < spec_.width && c.y < spec_.height;
  }
  std::size_t index(Cell c) const {
    return static_cast<std::size_t>(c.y) * static_cast<std::size_t>(spec_.width) +
           static_cast<std::size_t>(c.x);
  }

  void init() {
    if (spec_.width < 1 || spec_.height < 1) throw Error("grid dimensions must be positive");
    for (const auto& w : spec_.walls) {
      if (!in_bounds(w)) throw Error("wall cell out of bounds: " + describe(w));
      if (spec_.doorways.count(w)) throw Error("cell is both wall and doorway: " + describe(w));
    }
    for (const auto& d : spec_.doorways)
      if (!in_bounds(d)) throw Error("doorway cell out of bounds: " + describe(d));

    cell_index_.assign(static_cast<std::size_t>(spec_.width * spec_.height), -1);
    for (int y = 0; y < spec_.height; ++y)
      for (int x = 0; x < spec_.width; ++x) {
        const Cell c{x, y};
        if (spec_.walls.count(c)) continue;
        cell_index_[index(c)] = static_cast<int>(free_cells_.size());
        free_cells_.push_back(c);
      }
    if (free_cells_.empty()) throw Error("grid has no free cells");

    const std::size_t per_cell = spec_.directed ? 4 : 1;
    cell_of_.reserve(free_cells_.size() * per_cell);
    for (Cell c : free_cells_)
      for (std::size_t h = 0; h < per_cell; ++h) cell_of_.push_back(c);

    const std::size_t na = num_actions();
    next_.resize(num_states() * na);
    for (StateId s = 0; s < num_states(); ++s) {
      const Cell c = cell_of_[s];
      for (ActionId a = 0; a < na; ++a) {
        StateId succ = s;
        if (!spec_.directed) {
          static constexpr std::array<Cell, 4> moves = {{{0, -1}, {0, 1}, {-1, 0}, {1, 0}}};
          const Cell n{c.x + moves[a].x, c.y + moves[a].y};
          if (is_free(n)) succ = *state_at(n);
        } else {
          const int h = static_cast<int>(s % 4);
          if (a == static_cast<ActionId>(DirectedAction::forward)) {
            const Cell n{c.x + kHeadingStep[h].x, c.y + kHeadingStep[h].y};
            if (is_free(n)) succ = *state_at(n, static_cast<Heading>(h));
          } else {
            const int nh = a == static_cast<ActionId>(DirectedAction::turn_left) ? (h + 3) % 4
                                                                                  : (h + 1) % 4;
            succ = *state_at(c, static_cast<Heading>(nh));
          }
        }
        next_[s * na + a] = succ;
      }
    }
    check_strongly_connected();
  }

  void check_strongly_connected() const {
    const auto fwd = bfs_distances(0);
    for (StateId s = 0; s < num_states(); ++s)
      if (fwd[s] < 0)
        throw Error("free-state graph is disconnected: " + describe(cell_of_[s]) +
                    " unreachable");
    // reverse reachability
    std::vector<std::vector<StateId>> pred(num_states());
    for (StateId s = 0; s < num_states(); ++s)
      for (ActionId a = 0; a < num_actions(); ++a) pred[next_[s * num_actions() + a]].push_back(s);
    std::vector<char> seen(num_states(), 0);
    std::queue<StateId> q;
    q.push(0);
    seen[0] = 1;
    std::size_t count = 1;
    while (!q.empty()) {
      const StateId s = q.front();
      q.pop();
      for (StateId p : pred[s])
        if (!seen[p]) {
          seen[p] = 1;
          ++count;
          q.push(p);
        }
    }
    if (count != num_states()) throw Error("free-state graph is not strongly connected");
  }

  std::string name_;
  GridSpec spec_;
  FeatureFrame frame_;
  std::vector<int> cell_index_;
  std::vector<Cell> free_cells_;
  std::vector<Cell> cell_of_;
  std::vector<StateId> next_;
  std::vector<int> room_of_;
  int num_rooms_ = 0;
};

// ---------------------------------------------------------------------------
// Builders

inline GridMdp build_open_grid(int width, int height) {
  if (width < 1 || height < 1) throw Error("open grid: dimensions must be positive");
  return GridMdp::build({width, height, {}, {}, false}, "open");
}

/// Vertical wall at column width/2 with a single gap at `gap_row`.
inline GridMdp build_wall_world(int width, int height, int gap_row) {
  if (width < 5 || width % 2 == 0) throw Error("wall world: width must be odd and >= 5");
  if (height < 1) throw Error("wall world: height must be positive");
  if (gap_row < 0 || gap_row >= height) throw Error("wall world: gap_row out of range");
  GridSpec spec{width, height, {}, {}, false};
  const int col = width / 2;
  for (int y = 0; y < height; ++y)
    if (y != gap_row) spec.walls.insert({col, y});
  return GridMdp::build(std::move(spec), "wall");
}

/// Four rooms split by a central cross of walls, one mid-wall doorway per
/// shared wall, placed symmetrically.
inline GridMdp build_four_rooms(int width, int height) {
  if (width < 9 || height < 9 || width % 2 == 0 || height % 2 == 0)
    throw Error("four rooms: width and height must be odd and >= 9 to host doorways");
  const int cx = width / 2;
  const int cy = height / 2;
  GridSpec spec{width, height, {}, {}, false};
  for (int y = 0; y < height; ++y) spec.walls.insert({cx, y});
  for (int x = 0; x < width; ++x) spec.walls.insert({x, cy});
  const std::array<Cell, 4> doors = {{{cx, cy / 2},
                                      {cx, height - 1 - cy / 2},
                                      {cx / 2, cy},
                                      {width - 1 - cx / 2, cy}}};
  for (Cell d : doors) {
    spec.walls.erase(d);
    spec.doorways.insert(d);
  }
  GridMdp m = GridMdp::build(std::move(spec), "four_rooms");
  m.label_rooms();
  return m;
}

/// Open grid whose state carries a heading; position is the important
/// factor and heading the secondary one.
inline GridMdp build_directed_grid(int width, int height) {
  if (width < 5 || height < 5) throw Error("directed grid: width and height must be >= 5");
  return GridMdp::build({width, height, {}, {}, true}, "directed");
}

}  // namespace arclab
