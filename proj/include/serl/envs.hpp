#pragma once

// KeyDoorGrid and MiniShop: deterministic multi-turn text environments.

#include <algorithm>
#include <array>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "serl/core.hpp"
#include "serl/rng.hpp"

namespace serl {

enum class EnvKind { KeyDoor, MiniShop };

inline std::string_view env_name(EnvKind k) {
  switch (k) {
    case EnvKind::KeyDoor: return "keydoor";
    case EnvKind::MiniShop: return "minishop";
  }
  throw std::invalid_argument("unknown environment kind");
}

inline EnvKind parse_env(std::string_view s) {
  if (s == "keydoor") return EnvKind::KeyDoor;
  if (s == "minishop") return EnvKind::MiniShop;
  throw std::invalid_argument("unknown environment kind '" + std::string(s) + "'");
}

inline int default_max_turns(EnvKind k) { return k == EnvKind::KeyDoor ? 50 : 15; }
inline int default_env_size(EnvKind k) { return k == EnvKind::KeyDoor ? 3 : 20; }

struct TaskSpec {
  std::string task_id;
  std::string goal_text;
  EnvKind kind = EnvKind::KeyDoor;
  std::uint64_t seed = 0;
  // Grid side length for KeyDoorGrid, catalog size for MiniShop.
  int size = 0;

  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

struct StepOutcome {
  std::string feedback_text;
  std::string next_observation_text;
  bool done = false;
  double reward = 0.0;
};

inline constexpr std::string_view kNothingHappens = "Nothing happens.";

inline std::string normalize_command(std::string_view text) {
  std::string out;
  for (const auto& w : split_words(text)) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

// ---------------------------------------------------------------------------
// KeyDoorGrid

struct Cell {
  int row = 0;
  int col = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

enum class ItemPlace { Floor = 0, Held = 1, Placed = 2 };

struct KeyDoorState {
  int size = 3;
  Cell agent, key, door, item, target;
  bool has_key = false;
  bool door_open = false;
  ItemPlace item_place = ItemPlace::Floor;
  bool done = false;

  friend bool operator==(const KeyDoorState&, const KeyDoorState&) = default;
};

inline constexpr std::string_view kKeyDoorGoal = "Goal: put the item on the target behind the door .";

inline const std::vector<std::string>& keydoor_commands() {
  static const std::vector<std::string> cmds = {"go north", "go south", "go east",  "go west", "take key",
                                                "open door", "take item", "put item", "look"};
  return cmds;
}

namespace detail {

inline std::string keydoor_render(const KeyDoorState& s) {
  if (s.done) return "Task complete .";
  std::string object;
  Cell goal;
  if (!s.has_key) {
    object = "key";
    goal = s.key;
  } else if (!s.door_open) {
    object = "door";
    goal = s.door;
  } else if (s.item_place == ItemPlace::Floor) {
    object = "item";
    goal = s.item;
  } else {
    object = "target";
    goal = s.target;
  }
  // First distance-reducing direction in alphabetical order.
  std::string dir = "here";
  if (goal.col > s.agent.col) dir = "east";
  else if (goal.row < s.agent.row) dir = "north";
  else if (goal.row > s.agent.row) dir = "south";
  else if (goal.col < s.agent.col) dir = "west";
  std::ostringstream os;
  os << "You are at row " << s.agent.row << " col " << s.agent.col << " . Next: " << object << ' ' << dir << " .";
  return os.str();
}

inline KeyDoorState keydoor_layout(const TaskSpec& task) {
  const int g = task.size;
  if (g < 2 || g > 10) throw std::invalid_argument("keydoor grid size must lie in [2, 10]");
  Rng rng(derive_seed(task.seed, "keydoor-layout"));
  std::vector<int> cells(static_cast<std::size_t>(g * g));
  std::iota(cells.begin(), cells.end(), 0);
  for (std::size_t i = 0; i < 4; ++i) {
    std::size_t j = i + uniform_index(rng, cells.size() - i);
    std::swap(cells[i], cells[j]);
  }
  auto at = [g](int c) { return Cell{c / g, c % g}; };
  KeyDoorState s;
  s.size = g;
  s.key = at(cells[0]);
  s.door = at(cells[1]);
  s.item = at(cells[2]);
  s.target = at(cells[3]);
  s.agent = at(static_cast<int>(uniform_index(rng, cells.size())));
  return s;
}

inline std::pair<KeyDoorState, StepOutcome> keydoor_step(const KeyDoorState& s, const std::string& cmd) {
  KeyDoorState n = s;
  std::string fb(kNothingHappens);
  auto move = [&](int dr, int dc, const char* name) {
    Cell c{s.agent.row + dr, s.agent.col + dc};
    if (c.row < 0 || c.col < 0 || c.row >= s.size || c.col >= s.size) return;
    n.agent = c;
    fb = std::string("You move ") + name + " .";
  };
  if (cmd == "go north") move(-1, 0, "north");
  else if (cmd == "go south") move(1, 0, "south");
  else if (cmd == "go east") move(0, 1, "east");
  else if (cmd == "go west") move(0, -1, "west");
  else if (cmd == "take key") {
    if (s.agent == s.key && !s.has_key) {
      n.has_key = true;
      fb = "You pick up the key.";
    }
  } else if (cmd == "open door") {
    if (s.agent == s.door && s.has_key && !s.door_open) {
      n.door_open = true;
      fb = "You open the door .";
    }
  } else if (cmd == "take item") {
    if (s.agent == s.item && s.door_open && s.item_place == ItemPlace::Floor) {
      n.item_place = ItemPlace::Held;
      fb = "You pick up the item .";
    }
  } else if (cmd == "put item") {
    if (s.agent == s.target && s.door_open && s.item_place == ItemPlace::Held) {
      n.item_place = ItemPlace::Placed;
      n.done = true;
      fb = "You put the item on the target .";
    }
  } else if (cmd == "look") {
    fb = "You look around .";
  }
  StepOutcome out;
  out.feedback_text = fb;
  out.next_observation_text = keydoor_render(n);
  out.done = n.done;
  out.reward = n.done ? 1.0 : 0.0;
  return {n, out};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// MiniShop

inline const std::array<std::vector<std::string>, 3>& shop_attribute_pools() {
  static const std::array<std::vector<std::string>, 3> pools = {
      std::vector<std::string>{"red", "blue", "green", "black", "white"},
      std::vector<std::string>{"shoes", "shirt", "hat", "bag", "jacket"},
      std::vector<std::string>{"small", "medium", "large"}};
  return pools;
}

inline constexpr int kShopMaxItems = 50;
inline constexpr std::size_t kShopResultsShown = 5;
inline constexpr std::size_t kShopMaxQueryWords = 10;

using Attributes = std::array<std::string, 3>;

struct ShopCatalog {
  std::vector<Attributes> items;
  Attributes required;
};

enum class ShopPage { Home, Results, Item };

struct ShopState {
  std::shared_ptr<const ShopCatalog> catalog;
  ShopPage page = ShopPage::Home;
  std::vector<std::string> query;
  std::vector<int> shown;
  int item = -1;
  bool done = false;

  friend bool operator==(const ShopState& a, const ShopState& b) {
    return a.catalog == b.catalog && a.page == b.page && a.query == b.query && a.shown == b.shown && a.item == b.item &&
           a.done == b.done;
  }
};

inline std::string shop_goal_text(const Attributes& req) {
  return "Instruction: buy " + req[0] + ' ' + req[1] + ' ' + req[2] + " .";
}

inline int shop_match_count(const Attributes& item, const std::vector<std::string>& query) {
  int count = 0;
  for (const auto& w : query) {
    if (std::find(item.begin(), item.end(), w) != item.end()) ++count;
  }
  return count;
}

// Matched required attributes over 3.
inline double shop_score(const Attributes& item, const Attributes& required) {
  int matched = 0;
  for (const auto& r : required) {
    if (std::find(item.begin(), item.end(), r) != item.end()) ++matched;
  }
  return matched / 3.0;
}

// Top results by descending match count, ties by ascending index.
inline std::vector<int> shop_rank(const ShopCatalog& cat, const std::vector<std::string>& query) {
  std::vector<int> idx(cat.items.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<int> score(cat.items.size());
  for (std::size_t i = 0; i < cat.items.size(); ++i) score[i] = shop_match_count(cat.items[i], query);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return score[a] > score[b]; });
  idx.resize(std::min(idx.size(), kShopResultsShown));
  return idx;
}

namespace detail {

inline std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

inline std::string shop_render(const ShopState& s) {
  if (s.done) return "Task complete .";
  const auto& cat = *s.catalog;
  std::string out = shop_goal_text(cat.required);
  auto describe = [&](int k) {
    const auto& a = cat.items[static_cast<std::size_t>(k)];
    return "item-" + std::to_string(k) + ' ' + a[0] + ' ' + a[1] + ' ' + a[2] + " .";
  };
  switch (s.page) {
    case ShopPage::Home:
      out += " Page: search .";
      break;
    case ShopPage::Results:
      out += " Page: results .";
      for (int k : s.shown) out += ' ' + describe(k);
      break;
    case ShopPage::Item:
      out += " Page: " + describe(s.item) + " Options: buy back .";
      break;
  }
  return out;
}

inline std::shared_ptr<const ShopCatalog> shop_catalog(const TaskSpec& task) {
  if (task.size < 1 || task.size > kShopMaxItems) throw std::invalid_argument("minishop catalog size must lie in [1, 50]");
  Rng rng(derive_seed(task.seed, "minishop-catalog"));
  const auto& pools = shop_attribute_pools();
  auto cat = std::make_shared<ShopCatalog>();
  auto draw = [&]() {
    Attributes a;
    for (std::size_t p = 0; p < 3; ++p) a[p] = pools[p][uniform_index(rng, pools[p].size())];
    return a;
  };
  for (int i = 0; i < task.size; ++i) cat->items.push_back(draw());
  cat->required = draw();
  cat->items[uniform_index(rng, cat->items.size())] = cat->required;
  return cat;
}

inline std::pair<ShopState, StepOutcome> shop_step(const ShopState& s, const std::string& cmd) {
  ShopState n = s;
  std::string fb(kNothingHappens);
  double reward = 0.0;
  auto words = split_words(cmd);
  const auto& cat = *s.catalog;
  if (!words.empty()) {
    const std::string& verb = words[0];
    if (verb == "search" && s.page == ShopPage::Home && words.size() >= 2 && words.size() <= kShopMaxQueryWords + 1) {
      n.page = ShopPage::Results;
      n.query.assign(words.begin() + 1, words.end());
      n.shown = shop_rank(cat, n.query);
      fb = "You search for " + join(n.query) + " .";
    } else if (verb == "click" && s.page == ShopPage::Results && words.size() == 2 && words[1].rfind("item-", 0) == 0) {
      for (int k : s.shown) {
        if (words[1] == "item-" + std::to_string(k)) {
          n.page = ShopPage::Item;
          n.item = k;
          fb = "You open item-" + std::to_string(k) + " .";
        }
      }
    } else if (verb == "buy" && words.size() == 1 && s.page == ShopPage::Item) {
      n.done = true;
      reward = shop_score(cat.items[static_cast<std::size_t>(s.item)], cat.required);
      fb = "You buy item-" + std::to_string(s.item) + " .";
    } else if (verb == "back" && words.size() == 1 && s.page != ShopPage::Home) {
      if (s.page == ShopPage::Item) {
        n.page = ShopPage::Results;
        n.item = -1;
      } else {
        n.page = ShopPage::Home;
        n.query.clear();
        n.shown.clear();
      }
      fb = "You go back .";
    }
  }
  StepOutcome out;
  out.feedback_text = fb;
  out.next_observation_text = shop_render(n);
  out.done = n.done;
  out.reward = reward;
  return {n, out};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Uniform environment interface

using EnvState = std::variant<KeyDoorState, ShopState>;

inline std::string state_key(const EnvState& state) {
  if (const auto* kd = std::get_if<KeyDoorState>(&state)) {
    std::ostringstream os;
    os << "pos=" << kd->agent.row << ',' << kd->agent.col << ";key=" << kd->has_key << ";door=" << kd->door_open
       << ";item=" << static_cast<int>(kd->item_place);
    return os.str();
  }
  const auto& sh = std::get<ShopState>(state);
  if (sh.done) return "page=done;item=" + std::to_string(sh.item);
  switch (sh.page) {
    case ShopPage::Home: return "page=home";
    case ShopPage::Results: return "page=results;query=" + detail::join(sh.query);
    case ShopPage::Item: return "page=item;item=" + std::to_string(sh.item) + ";query=" + detail::join(sh.query);
  }
  throw std::logic_error("bad shop page");
}

inline bool is_terminal(const EnvState& state) {
  return std::visit([](const auto& s) { return s.done; }, state);
}

inline EnvKind kind_of(const EnvState& state) {
  return std::holds_alternative<KeyDoorState>(state) ? EnvKind::KeyDoor : EnvKind::MiniShop;
}

struct ResetResult {
  EnvState state;
  std::string observation;
};

inline ResetResult reset(const TaskSpec& task) {
  switch (task.kind) {
    case EnvKind::KeyDoor: {
      auto s = detail::keydoor_layout(task);
      std::string obs = std::string(kKeyDoorGoal) + " Grid " + std::to_string(s.size) + " x " + std::to_string(s.size) +
                        " . " + detail::keydoor_render(s);
      return {s, obs};
    }
    case EnvKind::MiniShop: {
      ShopState s;
      s.catalog = detail::shop_catalog(task);
      return {s, detail::shop_render(s)};
    }
  }
  throw std::invalid_argument("reset: unknown environment kind");
}

inline std::pair<EnvState, StepOutcome> env_step(const EnvState& state, std::string_view command) {
  if (is_terminal(state)) throw std::logic_error("env_step: state is terminal");
  std::string cmd = normalize_command(command);
  if (const auto* kd = std::get_if<KeyDoorState>(&state)) {
    auto [n, out] = detail::keydoor_step(*kd, cmd);
    return {EnvState(n), out};
  }
  auto [n, out] = detail::shop_step(std::get<ShopState>(state), cmd);
  return {EnvState(std::move(n)), out};
}

inline std::vector<std::string> action_grammar(EnvKind kind) {
  if (kind == EnvKind::KeyDoor) return keydoor_commands();
  return {"search <word>...", "click item-<k>", "buy", "back"};
}

// Attribute words usable in MiniShop queries, in pool order.
inline std::vector<std::string> shop_query_words() {
  std::vector<std::string> out;
  for (const auto& pool : shop_attribute_pools()) out.insert(out.end(), pool.begin(), pool.end());
  return out;
}

// Concrete commands worth trying in `state`, sorted lexicographically.  For
// MiniShop, queries are every set of 1..3 distinct attribute words.
inline std::vector<std::string> candidate_commands(const EnvState& state) {
  std::vector<std::string> out;
  if (std::holds_alternative<KeyDoorState>(state)) {
    out = keydoor_commands();
  } else {
    const auto& s = std::get<ShopState>(state);
    switch (s.page) {
      case ShopPage::Home: {
        auto words = shop_query_words();
        std::sort(words.begin(), words.end());
        const std::size_t n = words.size();
        for (std::size_t a = 0; a < n; ++a) {
          out.push_back("search " + words[a]);
          for (std::size_t b = a + 1; b < n; ++b) {
            out.push_back("search " + words[a] + ' ' + words[b]);
            for (std::size_t c = b + 1; c < n; ++c) out.push_back("search " + words[a] + ' ' + words[b] + ' ' + words[c]);
          }
        }
        break;
      }
      case ShopPage::Results:
        out.push_back("back");
        for (int k : s.shown) out.push_back("click item-" + std::to_string(k));
        break;
      case ShopPage::Item:
        out = {"back", "buy"};
        break;
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Closed word list of an environment, markers excluded.
inline Vocabulary make_vocabulary(EnvKind kind) {
  std::vector<std::string> words;
  auto add = [&](std::string_view text) {
    for (auto& w : split_words(text)) {
      if (std::find(words.begin(), words.end(), w) == words.end()) words.push_back(std::move(w));
    }
  };
  add(kNothingHappens);
  add("Task complete .");
  if (kind == EnvKind::KeyDoor) {
    add(kKeyDoorGoal);
    add("Grid x You are at row col Next: key door item target east north south west here");
    add("You move You pick up the key. You open the door You put the item on the target You look around");
    for (const auto& c : keydoor_commands()) add(c);
    for (int d = 0; d < 10; ++d) add(std::to_string(d));
  } else {
    add("Instruction: buy Page: search results Options: back click You for open go");
    for (const auto& w : shop_query_words()) add(w);
    for (int k = 0; k < kShopMaxItems; ++k) add("item-" + std::to_string(k));
  }
  return Vocabulary(words);
}

}  // namespace serl
