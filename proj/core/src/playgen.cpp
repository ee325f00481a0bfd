#include "mdt/playgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>

namespace mdt::play {

namespace {

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }
double clamp1(double v) { return std::min(1.0, std::max(-1.0, v)); }

double dist(const std::array<double, 2>& a, const std::array<double, 2>& b) {
    const double dx = a[0] - b[0];
    const double dy = a[1] - b[1];
    return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

void EnvState::to_floats(float* out, size_t blocks) const {
    out[0] = static_cast<float>(agent[0]);
    out[1] = static_cast<float>(agent[1]);
    for (size_t b = 0; b < blocks; ++b) {
        out[2 + 2 * b] = static_cast<float>(block[b][0]);
        out[3 + 2 * b] = static_cast<float>(block[b][1]);
    }
    for (size_t b = 0; b < blocks; ++b) out[2 + 2 * blocks + b] = carried[b] ? 1.0f : 0.0f;
}

EnvState EnvState::from_floats(const float* in, size_t blocks) {
    EnvState s;
    s.agent = {in[0], in[1]};
    s.block.resize(blocks);
    s.carried.resize(blocks);
    for (size_t b = 0; b < blocks; ++b) {
        s.block[b] = {in[2 + 2 * b], in[3 + 2 * b]};
        s.carried[b] = in[2 + 2 * blocks + b] > 0.5f ? 1 : 0;
    }
    return s;
}

EnvState initial_state(Rng& rng, const EnvConfig& cfg) {
    EnvState s;
    s.agent = {rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)};
    s.block.resize(cfg.blocks);
    s.carried.assign(cfg.blocks, 0);
    for (size_t b = 0; b < cfg.blocks; ++b) {
        for (int tries = 0; tries < 100; ++tries) {
            s.block[b] = {rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85)};
            bool ok = true;
            for (size_t o = 0; o < b; ++o)
                if (dist(s.block[b], s.block[o]) < 0.12) ok = false;
            if (ok) break;
        }
    }
    return s;
}

EnvState step(const EnvState& s, const Action& a, const EnvConfig& cfg) {
    EnvState n = s;
    n.agent[0] = clamp01(s.agent[0] + cfg.move_scale * clamp1(a[0]));
    n.agent[1] = clamp01(s.agent[1] + cfg.move_scale * clamp1(a[1]));
    for (size_t b = 0; b < cfg.blocks; ++b)
        if (n.carried[b]) n.block[b] = n.agent;
    const double grip = a[2];
    if (grip > 0.0) {
        bool holding = false;
        for (uint8_t c : n.carried) holding |= c != 0;
        if (!holding) {
            size_t best = cfg.blocks;
            double best_d = cfg.pick_radius;
            for (size_t b = 0; b < cfg.blocks; ++b) {
                const double d = dist(n.agent, n.block[b]);
                if (d < best_d) {
                    best_d = d;
                    best = b;
                }
            }
            if (best < cfg.blocks) {
                n.carried[best] = 1;
                n.block[best] = n.agent;
            }
        }
    } else if (grip < 0.0) {
        std::fill(n.carried.begin(), n.carried.end(), 0);
    }
    return n;
}

// ---------------------------------------------------------------------------
// Tasks
// ---------------------------------------------------------------------------

size_t task_count(const EnvConfig& cfg) { return cfg.blocks + cfg.blocks * EnvConfig::kZones; }

TaskSpec task_from_id(size_t id, const EnvConfig& cfg) {
    if (id >= task_count(cfg)) throw ContractError("task_from_id: id out of range");
    TaskSpec t;
    t.id = id;
    if (id < cfg.blocks) {
        t.kind = TaskKind::Reach;
        t.block = id;
    } else {
        t.kind = TaskKind::Move;
        t.block = (id - cfg.blocks) / EnvConfig::kZones;
        t.zone = (id - cfg.blocks) % EnvConfig::kZones;
    }
    return t;
}

bool success_detector(const EnvState& s, const TaskSpec& task, const EnvConfig& cfg) {
    if (task.kind == TaskKind::Reach) return dist(s.agent, s.block[task.block]) <= cfg.reach_radius;
    if (s.carried[task.block]) return false;
    const auto z = cfg.zone_center(task.zone);
    return dist(s.block[task.block], {z[0], z[1]}) <= cfg.zone_radius;
}

Action ScriptedController::act(const EnvState& s, Rng& rng, double noise) const {
    std::array<double, 2> target = s.agent;
    double grip = -1.0;
    if (task_.kind == TaskKind::Reach) {
        target = s.block[task_.block];
    } else {
        const auto zone = cfg_.zone_center(task_.zone);
        if (s.carried[task_.block]) {
            target = {zone[0], zone[1]};
            grip = dist(s.agent, target) < 0.02 ? -1.0 : 1.0;
        } else if (!success_detector(s, task_, cfg_)) {
            target = s.block[task_.block];
            // Close the gripper only when the intended block is the nearest
            // one, so the pick in step() cannot grab a neighbour.
            const double d = dist(s.agent, s.block[task_.block]);
            if (d < 0.04) {
                bool nearest = true;
                for (size_t b = 0; b < cfg_.blocks; ++b)
                    if (b != task_.block && dist(s.agent, s.block[b]) < d) nearest = false;
                if (nearest) grip = 1.0;
            }
        }
    }
    Action a;
    a[0] = clamp1((target[0] - s.agent[0]) / cfg_.move_scale + noise * rng.normal());
    a[1] = clamp1((target[1] - s.agent[1]) / cfg_.move_scale + noise * rng.normal());
    a[2] = grip;
    return a;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace {

void splat_disk(float* img, size_t size, double cx, double cy, double radius, double value) {
    const double aa = 1.0 / static_cast<double>(size);
    const int lo_r = std::max(0, static_cast<int>((cy - radius - aa) * size));
    const int hi_r = std::min(static_cast<int>(size) - 1, static_cast<int>((cy + radius + aa) * size) + 1);
    const int lo_c = std::max(0, static_cast<int>((cx - radius - aa) * size));
    const int hi_c = std::min(static_cast<int>(size) - 1, static_cast<int>((cx + radius + aa) * size) + 1);
    for (int r = lo_r; r <= hi_r; ++r) {
        const double py = (r + 0.5) / size;
        for (int c = lo_c; c <= hi_c; ++c) {
            const double px = (c + 0.5) / size;
            const double d = std::sqrt((px - cx) * (px - cx) + (py - cy) * (py - cy));
            const double cov = std::min(1.0, std::max(0.0, (radius - d) / aa + 0.5));
            const float v = static_cast<float>(value * cov);
            float& dst = img[r * size + c];
            if (v > dst) dst = v;
        }
    }
}

double block_shade(size_t b) {
    static constexpr double kShades[] = {0.75, 0.55, 0.35};
    return b < 3 ? kShades[b] : 0.25;
}

}  // namespace

void render_views(const EnvState& s, const EnvConfig& cfg, float* out) {
    const size_t size = cfg.image_size;
    const size_t px = size * size;
    std::fill(out, out + cfg.views * px, 0.0f);

    float* top = out;
    for (size_t b = 0; b < s.block.size(); ++b)
        splat_disk(top, size, s.block[b][0], s.block[b][1], 0.07, block_shade(b));
    splat_disk(top, size, s.agent[0], s.agent[1], 0.1, 1.0);

    if (cfg.views < 2) return;
    float* strip = out + px;
    const size_t n_bands = 1 + s.block.size();
    const double band_h = 1.0 / static_cast<double>(n_bands);
    splat_disk(strip, size, s.agent[0], 0.5 * band_h, 0.06, 1.0);
    for (size_t b = 0; b < s.block.size(); ++b) {
        const double cy = (1.5 + static_cast<double>(b)) * band_h;
        splat_disk(strip, size, s.block[b][0], cy, 0.06, s.carried[b] ? 1.0 : 0.7);
    }
}

// ---------------------------------------------------------------------------
// Language
// ---------------------------------------------------------------------------

namespace {

const char* color_name(size_t b) {
    static constexpr const char* kColors[] = {"red", "green", "blue", "gray"};
    return kColors[std::min<size_t>(b, 3)];
}

const char* zone_name(size_t z) {
    static constexpr const char* kZoneNames[] = {"top left", "top right", "bottom left", "bottom right"};
    return kZoneNames[z % 4];
}

std::string render_template(const TaskSpec& task, size_t paraphrase) {
    const std::string c = color_name(task.block);
    if (task.kind == TaskKind::Reach) {
        switch (paraphrase % kParaphrases) {
            case 0: return "reach the " + c + " block";
            case 1: return "go to the " + c + " block";
            default: return "approach the " + c + " block";
        }
    }
    const std::string z = zone_name(task.zone);
    switch (paraphrase % kParaphrases) {
        case 0: return "move the " + c + " block to the " + z + " corner";
        case 1: return "put the " + c + " block in the " + z + " corner";
        default: return "carry the " + c + " block to the " + z + " corner";
    }
}

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

Vocab build_vocab() {
    EnvConfig cfg;  // vocabulary covers the largest supported block count
    cfg.blocks = 4;
    std::map<std::string, int> seen;
    for (size_t id = 0; id < task_count(cfg); ++id)
        for (size_t p = 0; p < kParaphrases; ++p)
            for (const auto& w : split_words(render_template(task_from_id(id, cfg), p))) seen[w] = 1;
    Vocab v;
    v.words.push_back("<pad>");
    for (const auto& [w, _] : seen) v.words.push_back(w);
    return v;
}

}  // namespace

const Vocab& vocabulary() {
    static const Vocab v = build_vocab();
    return v;
}

size_t max_lang_len() { return 9; }

std::string instruction_text(const TaskSpec& task, size_t paraphrase, const EnvConfig&) {
    return render_template(task, paraphrase);
}

std::vector<uint16_t> instruction_tokens(const TaskSpec& task, size_t paraphrase, const EnvConfig& cfg) {
    const Vocab& v = vocabulary();
    std::vector<uint16_t> ids;
    for (const auto& w : split_words(instruction_text(task, paraphrase, cfg))) {
        const auto it = std::find(v.words.begin(), v.words.end(), w);
        if (it == v.words.end()) throw ContractError("instruction word missing from vocabulary: " + w);
        ids.push_back(static_cast<uint16_t>(it - v.words.begin()));
    }
    return ids;
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

PlayEpisode generate_play_episode(Rng& rng, size_t n_tasks, const PlaygenConfig& cfg) {
    if (n_tasks < 1) throw ContractError("generate_play_episode: n_tasks must be >= 1");
    PlayEpisode ep;
    const size_t px = cfg.env.image_size * cfg.env.image_size * cfg.env.views;
    EnvState s = initial_state(rng, cfg.env);
    ep.states.push_back(s);
    ep.renders.resize(px);
    render_views(s, cfg.env, ep.renders.data());

    for (size_t t = 0; t < n_tasks; ++t) {
        TaskSpec task;
        bool fresh = false;
        for (int tries = 0; tries < 10 && !fresh; ++tries) {
            task = task_from_id(rng.index(task_count(cfg.env)), cfg.env);
            fresh = !success_detector(s, task, cfg.env);
        }
        if (!fresh) continue;
        const size_t start = ep.actions.size();
        ScriptedController ctrl(task, cfg.env);
        bool done = false;
        for (size_t k = 0; k < cfg.max_task_steps && !done; ++k) {
            const Action a = ctrl.act(s, rng, cfg.action_noise);
            s = step(s, a, cfg.env);
            ep.actions.push_back(a);
            ep.states.push_back(s);
            ep.renders.resize(ep.renders.size() + px);
            render_views(s, cfg.env, ep.renders.data() + (ep.states.size() - 1) * px);
            done = success_detector(s, task, cfg.env);
        }
        if (done && rng.bernoulli(cfg.p_label)) {
            Annotation ann;
            ann.start = start;
            ann.end = ep.actions.size();
            ann.task_id = task.id;
            ann.tokens = instruction_tokens(task, rng.index(kParaphrases), cfg.env);
            ep.annotations.push_back(ann);
        }
    }
    return ep;
}

// ---------------------------------------------------------------------------
// Goal sampling and training windows
// ---------------------------------------------------------------------------

double goal_offset_pmf(size_t j) {
    if (j < kGoalOffsetMin || j > kGoalOffsetMax) return 0.0;
    const double q = 1.0 - kGoalOffsetP;
    const double norm = 1.0 - std::pow(q, static_cast<double>(kGoalOffsetMax - kGoalOffsetMin + 1));
    return kGoalOffsetP * std::pow(q, static_cast<double>(j - kGoalOffsetMin)) / norm;
}

size_t sample_goal_offset(Rng& rng) {
    const double q = 1.0 - kGoalOffsetP;
    const double norm = 1.0 - std::pow(q, static_cast<double>(kGoalOffsetMax - kGoalOffsetMin + 1));
    const double u = rng.uniform() * norm;
    // Smallest j whose truncated CDF reaches u.
    const double shift = std::log1p(-u) / std::log(q);
    size_t j = kGoalOffsetMin + static_cast<size_t>(shift);
    if (j > kGoalOffsetMax) j = kGoalOffsetMax;
    return j;
}

TrainSample make_train_sample(const PlayEpisode& ep, size_t i, size_t k, size_t v, Rng& rng) {
    if (v < 1) throw ContractError("make_train_sample: foresight distance must be >= 1");
    if (i + k > ep.actions.size()) throw ContractError("make_train_sample: window exceeds episode");
    TrainSample ts;
    ts.episode = &ep;
    ts.index = i;
    ts.chunk_len = k;
    const size_t last = ep.states.size() - 1;
    ts.goal_index = std::min(i + sample_goal_offset(rng), last);
    ts.future_index = std::min(i + v, last);
    for (const auto& ann : ep.annotations) {
        if (ann.start <= i && i < ann.end) {
            ts.has_language = true;
            ts.task_id = ann.task_id;
            ts.lang_tokens = ann.tokens;
            break;
        }
    }
    return ts;
}

// ---------------------------------------------------------------------------
// Action normalization
// ---------------------------------------------------------------------------

ActionScaler normalize_actions(std::vector<PlayEpisode>& episodes) {
    bool any = false;
    for (const auto& ep : episodes) any |= !ep.actions.empty();
    if (!any) throw ContractError("normalize_actions: empty dataset");

    std::array<double, 3> lo{}, hi{};
    lo.fill(std::numeric_limits<double>::infinity());
    hi.fill(-std::numeric_limits<double>::infinity());
    for (const auto& ep : episodes)
        for (const auto& a : ep.actions)
            for (size_t d = 0; d < 3; ++d) {
                lo[d] = std::min(lo[d], a[d]);
                hi[d] = std::max(hi[d], a[d]);
            }

    ActionScaler sc;
    for (size_t d = 0; d < 3; ++d) {
        if (hi[d] == lo[d]) {
            sc.degenerate[d] = true;
            sc.center[d] = lo[d];
            sc.half_range[d] = 1.0;
            std::fprintf(stderr, "normalize_actions: dimension %zu is constant (%g); mapping to 0\n", d, lo[d]);
        } else {
            sc.center[d] = 0.5 * (hi[d] + lo[d]);
            sc.half_range[d] = 0.5 * (hi[d] - lo[d]);
        }
    }
    for (auto& ep : episodes)
        for (auto& a : ep.actions) a = sc.normalize(a);
    return sc;
}

}  // namespace mdt::play
