#pragma once

// The toy play kitchen: a 2-D continuous environment with movable blocks, a
// scripted teleoperator that chains tasks into long unsegmented episodes,
// sparse language annotation, a two-view renderer, and the goal-offset
// sampling used to build training windows.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mdt/errors.hpp"
#include "mdt/rng.hpp"

namespace mdt::play {

// dx, dy, grip, each in [-1, 1].
using Action = std::array<double, 3>;

struct EnvConfig {
    size_t blocks = 3;
    double move_scale = 0.05;
    double pick_radius = 0.06;
    double reach_radius = 0.06;   // reach-task success distance
    double zone_radius = 0.05;    // move-task success distance
    size_t image_size = 32;
    size_t views = 2;

    std::array<double, 2> zone_center(size_t zone) const {
        static constexpr double kMargin = 0.1;
        switch (zone) {
            case 0: return {kMargin, kMargin};
            case 1: return {1.0 - kMargin, kMargin};
            case 2: return {kMargin, 1.0 - kMargin};
            default: return {1.0 - kMargin, 1.0 - kMargin};
        }
    }
    static constexpr size_t kZones = 4;

    size_t state_dim() const { return 2 + 3 * blocks; }
};

struct EnvState {
    std::array<double, 2> agent{0.5, 0.5};
    std::vector<std::array<double, 2>> block;
    std::vector<uint8_t> carried;  // at most one flag set

    void to_floats(float* out, size_t blocks) const;
    static EnvState from_floats(const float* in, size_t blocks);
};

EnvState initial_state(Rng& rng, const EnvConfig& cfg);

// Kinematic step: agent moves by move_scale * (dx, dy) clipped to [0,1]^2;
// grip > 0 near a block picks it up, grip < 0 drops, a carried block tracks
// the agent.
EnvState step(const EnvState& s, const Action& a, const EnvConfig& cfg);

// ---------------------------------------------------------------------------
// Tasks
// ---------------------------------------------------------------------------

enum class TaskKind { Reach, Move };

struct TaskSpec {
    size_t id = 0;
    TaskKind kind = TaskKind::Reach;
    size_t block = 0;
    size_t zone = 0;  // Move only
};

size_t task_count(const EnvConfig& cfg);
TaskSpec task_from_id(size_t id, const EnvConfig& cfg);

// Pure success predicate. Reach: agent within reach_radius of the block.
// Move: block within zone_radius of the zone center and not carried.
bool success_detector(const EnvState& s, const TaskSpec& task, const EnvConfig& cfg);

// Closed-loop proportional controller completing one task; the teleoperator
// stand-in. Noise perturbs only the xy action components.
class ScriptedController {
public:
    ScriptedController(const TaskSpec& task, const EnvConfig& cfg) : task_(task), cfg_(cfg) {}
    Action act(const EnvState& s, Rng& rng, double noise) const;

private:
    TaskSpec task_;
    EnvConfig cfg_;
};

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

// Two image_size x image_size grayscale views in [0,1]:
//   view 0 — top-down anti-aliased disks (agent brightest, per-block shades),
//   view 1 — identity-banded strip: each entity gets a fixed row band and a
//            disk at its x position; carried blocks render brighter.
void render_views(const EnvState& s, const EnvConfig& cfg, float* out);

// ---------------------------------------------------------------------------
// Language
// ---------------------------------------------------------------------------

struct Vocab {
    std::vector<std::string> words;  // index = token id; id 0 is the pad token
    size_t size() const { return words.size(); }
};

const Vocab& vocabulary();
size_t max_lang_len();
constexpr size_t kParaphrases = 3;
std::vector<uint16_t> instruction_tokens(const TaskSpec& task, size_t paraphrase, const EnvConfig& cfg);
std::string instruction_text(const TaskSpec& task, size_t paraphrase, const EnvConfig& cfg);

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

struct Annotation {
    size_t start = 0;  // first action index of the task interval
    size_t end = 0;    // one past the last action index
    size_t task_id = 0;
    std::vector<uint16_t> tokens;
};

struct PlayEpisode {
    std::vector<EnvState> states;   // length T+1
    std::vector<Action> actions;    // length T
    std::vector<float> renders;     // (T+1) * views * S * S
    std::vector<Annotation> annotations;

    size_t steps() const { return actions.size(); }

    const float* render_at(size_t t, size_t view, const EnvConfig& cfg) const {
        const size_t px = cfg.image_size * cfg.image_size;
        return renders.data() + (t * cfg.views + view) * px;
    }
};

struct PlaygenConfig {
    EnvConfig env;
    size_t episodes = 300;
    size_t tasks_per_episode = 6;
    double p_label = 0.02;
    double action_noise = 0.08;
    size_t max_task_steps = 200;
};

PlayEpisode generate_play_episode(Rng& rng, size_t n_tasks, const PlaygenConfig& cfg);

// ---------------------------------------------------------------------------
// Goal sampling and training windows
// ---------------------------------------------------------------------------

constexpr size_t kGoalOffsetMin = 20;
constexpr size_t kGoalOffsetMax = 50;
constexpr double kGoalOffsetP = 0.1;

// Truncated geometric draw: P(j) proportional to 0.9^(j-20) * 0.1 on [20,50],
// renormalized, inverse-CDF sampled.
size_t sample_goal_offset(Rng& rng);
double goal_offset_pmf(size_t j);

struct TrainSample {
    const PlayEpisode* episode = nullptr;
    size_t index = 0;         // window start i
    size_t chunk_len = 0;     // k
    size_t goal_index = 0;    // min(i + j, T), j ~ goal offset
    size_t future_index = 0;  // min(i + v, T)
    bool has_language = false;
    size_t task_id = 0;                // annotation task when has_language
    std::vector<uint16_t> lang_tokens;
};

TrainSample make_train_sample(const PlayEpisode& ep, size_t i, size_t k, size_t v, Rng& rng);

// ---------------------------------------------------------------------------
// Action normalization
// ---------------------------------------------------------------------------

struct ActionScaler {
    std::array<double, 3> center{0, 0, 0};
    std::array<double, 3> half_range{1, 1, 1};
    std::array<bool, 3> degenerate{false, false, false};

    Action normalize(const Action& a) const {
        Action r;
        for (size_t d = 0; d < 3; ++d) r[d] = degenerate[d] ? 0.0 : (a[d] - center[d]) / half_range[d];
        return r;
    }
    Action denormalize(const Action& a) const {
        Action r;
        for (size_t d = 0; d < 3; ++d) r[d] = center[d] + a[d] * half_range[d];
        return r;
    }
};

// Fits the per-dimension [min,max] -> [-1,1] map over every action in the
// dataset and rewrites the actions in place. Degenerate dimensions map to 0
// with unit inverse gain and emit a warning on stderr.
ActionScaler normalize_actions(std::vector<PlayEpisode>& episodes);

}  // namespace mdt::play
