#include <doctest.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "mdt/dataset.hpp"
#include "mdt/playgen.hpp"

using namespace mdt;
using namespace mdt::play;

namespace {

double d2(const std::array<double, 2>& a, const std::array<double, 2>& b) {
    return std::hypot(a[0] - b[0], a[1] - b[1]);
}

std::vector<uint8_t> slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("env step: zero action leaves the state unchanged") {
    EnvConfig cfg;
    Rng rng(1);
    EnvState s = initial_state(rng, cfg);
    EnvState n = step(s, {0.0, 0.0, 0.0}, cfg);
    CHECK(n.agent == s.agent);
    CHECK(n.block == s.block);
    CHECK(n.carried == s.carried);
}

TEST_CASE("env step: motion clips at the boundary") {
    EnvConfig cfg;
    EnvState s;
    s.agent = {0.99, 0.5};
    s.block = {{0.3, 0.3}, {0.6, 0.6}, {0.8, 0.2}};
    s.carried = {0, 0, 0};
    EnvState n = step(s, {1.0, 0.0, 0.0}, cfg);
    CHECK(n.agent[0] == 1.0);
    CHECK(n.agent[1] == 0.5);
}

TEST_CASE("env step: scripted pick-move-drop relocates a block") {
    EnvConfig cfg;
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        EnvState s = initial_state(rng, cfg);
        const TaskSpec task = task_from_id(cfg.blocks + rng.index(cfg.blocks * EnvConfig::kZones), cfg);
        ScriptedController ctrl(task, cfg);
        bool done = false;
        for (int t = 0; t < 300 && !done; ++t) {
            s = step(s, ctrl.act(s, rng, 0.0), cfg);
            done = success_detector(s, task, cfg);
        }
        REQUIRE(done);
        CHECK(d2(s.block[task.block], {cfg.zone_center(task.zone)[0], cfg.zone_center(task.zone)[1]}) <= 0.05);
        CHECK(!s.carried[task.block]);
    }
}

TEST_CASE("success detector thresholds") {
    EnvConfig cfg;
    EnvState s;
    s.agent = {0.5, 0.5};
    s.block = {{0.1, 0.1}, {0.6, 0.6}, {0.8, 0.2}};
    s.carried = {0, 0, 0};

    TaskSpec move = task_from_id(cfg.blocks + 0, cfg);  // move block 0 to zone 0 (0.1, 0.1)
    REQUIRE(move.kind == TaskKind::Move);
    CHECK(success_detector(s, move, cfg));  // exactly at the zone center

    s.block[0] = {0.1 + 0.051, 0.1};
    CHECK(!success_detector(s, move, cfg));  // strictly beyond the threshold

    s.block[0] = {0.1, 0.1};
    s.carried[0] = 1;
    CHECK(!success_detector(s, move, cfg));  // carried over the zone does not count

    TaskSpec reach = task_from_id(1, cfg);
    s.agent = {0.6 - 0.059, 0.6};
    s.carried = {0, 0, 0};
    CHECK(success_detector(s, reach, cfg));
    s.agent = {0.6 - 0.061, 0.6};
    CHECK(!success_detector(s, reach, cfg));
}

TEST_CASE("episode generation: noiseless controller always succeeds") {
    PlaygenConfig cfg;
    cfg.action_noise = 0.0;
    cfg.p_label = 1.0;
    cfg.tasks_per_episode = 5;
    Rng rng(3);
    PlayEpisode ep = generate_play_episode(rng, cfg.tasks_per_episode, cfg);
    REQUIRE(!ep.annotations.empty());
    // Every annotated interval ends in a success state of its task.
    for (const auto& ann : ep.annotations) {
        const TaskSpec task = task_from_id(ann.task_id, cfg.env);
        CHECK(success_detector(ep.states[ann.end], task, cfg.env));
        CHECK(ann.start < ann.end);
        CHECK(ann.end <= ep.actions.size());
    }
    // Intervals are non-overlapping and ordered.
    for (size_t i = 1; i < ep.annotations.size(); ++i)
        CHECK(ep.annotations[i - 1].end <= ep.annotations[i].start);
    CHECK(ep.states.size() == ep.actions.size() + 1);
}

TEST_CASE("episode generation: annotation probability endpoints") {
    PlaygenConfig cfg;
    cfg.tasks_per_episode = 4;
    {
        cfg.p_label = 0.0;
        Rng rng(5);
        PlayEpisode ep = generate_play_episode(rng, 4, cfg);
        CHECK(ep.annotations.empty());
    }
    {
        cfg.p_label = 1.0;
        cfg.action_noise = 0.0;
        Rng rng(5);
        PlayEpisode ep = generate_play_episode(rng, 4, cfg);
        CHECK(ep.annotations.size() >= 3);  // every completed task annotated
    }
}

TEST_CASE("goal offset distribution matches the truncated geometric") {
    // P(20) = 0.1 / (1 - 0.9^31)
    const double p20 = 0.1 / (1.0 - std::pow(0.9, 31.0));
    CHECK(goal_offset_pmf(20) == doctest::Approx(p20).epsilon(1e-12));
    CHECK(goal_offset_pmf(20) == doctest::Approx(0.10397).epsilon(1e-4));
    double total = 0.0;
    for (size_t j = 20; j <= 50; ++j) total += goal_offset_pmf(j);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));

    Rng rng(11);
    const size_t n = 1000000;
    std::vector<size_t> counts(51, 0);
    for (size_t i = 0; i < n; ++i) {
        const size_t j = sample_goal_offset(rng);
        REQUIRE(j >= 20);
        REQUIRE(j <= 50);
        counts[j]++;
    }
    double sup = 0.0;
    for (size_t j = 20; j <= 50; ++j)
        sup = std::max(sup, std::abs(static_cast<double>(counts[j]) / n - goal_offset_pmf(j)));
    CHECK(sup < 0.002);
}

TEST_CASE("make_train_sample slicing and clamping") {
    PlaygenConfig cfg;
    cfg.p_label = 1.0;
    cfg.action_noise = 0.0;
    Rng rng(9);
    PlayEpisode ep = generate_play_episode(rng, 5, cfg);
    REQUIRE(ep.actions.size() > 60);
    const size_t k = 10, v = 3;

    // chunk is actions[i..i+k) by definition of the window
    TrainSample ts = make_train_sample(ep, 4, k, v, rng);
    CHECK(ts.index == 4);
    CHECK(ts.chunk_len == k);
    CHECK(ts.goal_index >= 4 + 20);
    CHECK(ts.goal_index <= std::min(4 + 50UL, ep.states.size() - 1));
    CHECK(ts.future_index == 7);

    // at the episode tail everything clamps to the final frame
    const size_t tail = ep.actions.size() - k;
    TrainSample te = make_train_sample(ep, tail, k, v, rng);
    CHECK(te.goal_index == ep.states.size() - 1);

    // goal strictly postdates the state index unless clipped
    for (int rep = 0; rep < 50; ++rep) {
        const size_t i = rng.index(ep.actions.size() - k);
        TrainSample t2 = make_train_sample(ep, i, k, v, rng);
        CHECK(t2.goal_index > i);
    }

    // language present iff the window start lies in an annotated interval
    bool saw_lang = false;
    for (const auto& ann : ep.annotations) {
        TrainSample tl = make_train_sample(ep, ann.start, std::min(k, ep.actions.size() - ann.start), v, rng);
        CHECK(tl.has_language);
        CHECK(tl.task_id == ann.task_id);
        saw_lang = true;
    }
    CHECK(saw_lang);

    CHECK_THROWS_AS(make_train_sample(ep, ep.actions.size(), k, v, rng), ContractError);
    CHECK_THROWS_AS(make_train_sample(ep, 0, k, 0, rng), ContractError);
}

TEST_CASE("action normalization endpoints, degenerate rule, round trip") {
    PlaygenConfig pcfg;
    std::vector<PlayEpisode> eps(1);
    eps[0].actions = {{-0.05, 0.2, 1.0}, {0.05, 0.2, 1.0}, {0.0, 0.2, 1.0}};
    eps[0].states.resize(4);
    ActionScaler sc = normalize_actions(eps);

    CHECK(eps[0].actions[0][0] == doctest::Approx(-1.0));
    CHECK(eps[0].actions[1][0] == doctest::Approx(1.0));
    // constant dimensions map to zero with unit inverse gain
    CHECK(sc.degenerate[1]);
    CHECK(sc.degenerate[2]);
    CHECK(eps[0].actions[0][1] == 0.0);
    CHECK(sc.denormalize({0.0, 0.0, 0.0})[1] == doctest::Approx(0.2));

    // round trip within 1e-12 on non-degenerate dims
    Rng rng(2);
    for (int i = 0; i < 100; ++i) {
        Action a{rng.uniform(-0.05, 0.05), 0.2, 1.0};
        Action rt = sc.denormalize(sc.normalize(a));
        CHECK(std::abs(rt[0] - a[0]) < 1e-12);
        CHECK(std::abs(rt[1] - a[1]) < 1e-12);
        CHECK(std::abs(rt[2] - a[2]) < 1e-12);
    }

    std::vector<PlayEpisode> empty(2);
    CHECK_THROWS_AS(normalize_actions(empty), ContractError);
}

TEST_CASE("language annotation coverage converges to the configured rate") {
    PlaygenConfig cfg;
    cfg.p_label = 0.3;  // high rate keeps the variance of the estimate small
    cfg.tasks_per_episode = 4;
    Rng rng(13);
    size_t with_lang = 0;
    const size_t n = 10000;
    std::vector<PlayEpisode> eps;
    for (int e = 0; e < 40; ++e) {
        Rng erng(Rng::derive(99, 1, e));
        eps.push_back(generate_play_episode(erng, cfg.tasks_per_episode, cfg));
    }
    // expected coverage = annotated actions / total actions
    size_t ann_steps = 0, total_steps = 0;
    for (const auto& ep : eps) {
        total_steps += ep.actions.size();
        for (const auto& a : ep.annotations) ann_steps += a.end - a.start;
    }
    const double expected = static_cast<double>(ann_steps) / total_steps;
    const size_t k = 10;
    for (size_t i = 0; i < n; ++i) {
        const auto& ep = eps[rng.index(eps.size())];
        if (ep.actions.size() < k) continue;
        TrainSample ts = make_train_sample(ep, rng.index(ep.actions.size() - k + 1), k, 3, rng);
        with_lang += ts.has_language ? 1 : 0;
    }
    const double measured = static_cast<double>(with_lang) / n;
    CHECK(std::abs(measured - expected) / expected < 0.2);
}

TEST_CASE("dataset files are reproducible and round-trip byte-exactly") {
    PlaygenConfig cfg;
    cfg.episodes = 3;
    cfg.tasks_per_episode = 2;
    cfg.p_label = 0.5;
    const auto dir = std::filesystem::temp_directory_path() / "mdt_playgen_test";
    std::filesystem::create_directories(dir);
    const std::string p1 = (dir / "a.bin").string();
    const std::string p2 = (dir / "b.bin").string();
    const std::string p3 = (dir / "c.bin").string();

    Dataset d1 = generate_dataset(cfg, 4242);
    Dataset d2 = generate_dataset(cfg, 4242);
    save_dataset(p1, d1);
    save_dataset(p2, d2);
    CHECK(slurp(p1) == slurp(p2));

    Dataset loaded = load_dataset(p1);
    REQUIRE(loaded.episodes.size() == d1.episodes.size());
    save_dataset(p3, loaded);
    CHECK(slurp(p1) == slurp(p3));

    // spot-check payload content
    CHECK(loaded.episodes[0].actions.size() == d1.episodes[0].actions.size());
    CHECK(loaded.episodes[0].renders == d1.episodes[0].renders);
    for (size_t i = 0; i < d1.episodes[0].actions.size(); ++i)
        for (size_t d = 0; d < 3; ++d)
            CHECK(loaded.episodes[0].actions[i][d] ==
                  doctest::Approx(d1.episodes[0].actions[i][d]).epsilon(1e-7));
    std::filesystem::remove_all(dir);
}

TEST_CASE("renderer: two views, finite values, carried block brightens the strip") {
    EnvConfig cfg;
    EnvState s;
    s.agent = {0.5, 0.5};
    s.block = {{0.5, 0.5}, {0.2, 0.8}, {0.8, 0.2}};
    s.carried = {1, 0, 0};
    std::vector<float> img(cfg.views * cfg.image_size * cfg.image_size);
    render_views(s, cfg, img.data());
    float mx = 0.0f;
    for (float v : img) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
        mx = std::max(mx, v);
    }
    CHECK(mx == 1.0f);

    // carried vs dropped changes the strip view
    EnvState s2 = s;
    s2.carried = {0, 0, 0};
    std::vector<float> img2(img.size());
    render_views(s2, cfg, img2.data());
    const size_t px = cfg.image_size * cfg.image_size;
    bool differs = false;
    for (size_t i = px; i < 2 * px; ++i) differs |= img[i] != img2[i];
    CHECK(differs);
}

TEST_CASE("instruction templates tokenize within the declared bounds") {
    EnvConfig cfg;
    const Vocab& v = vocabulary();
    CHECK(v.words[0] == "<pad>");
    for (size_t id = 0; id < task_count(cfg); ++id)
        for (size_t p = 0; p < kParaphrases; ++p) {
            const auto toks = instruction_tokens(task_from_id(id, cfg), p, cfg);
            CHECK(!toks.empty());
            CHECK(toks.size() <= max_lang_len());
            for (auto t : toks) CHECK(t < v.size());
        }
}
