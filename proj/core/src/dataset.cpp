#include "mdt/dataset.hpp"

#include <cstring>

#include "mdt/container.hpp"

namespace mdt::play {

namespace {

nlohmann::json env_to_json(const EnvConfig& e) {
    return {{"blocks", e.blocks},      {"move_scale", e.move_scale},   {"pick_radius", e.pick_radius},
            {"reach_radius", e.reach_radius}, {"zone_radius", e.zone_radius}, {"image_size", e.image_size},
            {"views", e.views}};
}

EnvConfig env_from_json(const nlohmann::json& j) {
    EnvConfig e;
    e.blocks = j.at("blocks").get<size_t>();
    e.move_scale = j.at("move_scale").get<double>();
    e.pick_radius = j.at("pick_radius").get<double>();
    e.reach_radius = j.at("reach_radius").get<double>();
    e.zone_radius = j.at("zone_radius").get<double>();
    e.image_size = j.at("image_size").get<size_t>();
    e.views = j.at("views").get<size_t>();
    return e;
}

}  // namespace

void save_dataset(const std::string& path, const Dataset& ds) {
    const EnvConfig& env = ds.config.env;
    const size_t sdim = env.state_dim();
    const size_t px = env.image_size * env.image_size * env.views;

    Container c;
    c.magic = kDatasetMagic;
    nlohmann::json episodes = nlohmann::json::array();
    size_t offset = 0;
    for (const auto& ep : ds.episodes) {
        const size_t t = ep.steps();
        nlohmann::json anns = nlohmann::json::array();
        for (const auto& a : ep.annotations)
            anns.push_back({{"start", a.start}, {"end", a.end}, {"task", a.task_id}, {"tokens", a.tokens}});
        const size_t states_off = offset;
        const size_t actions_off = states_off + (t + 1) * sdim * 4;
        const size_t renders_off = actions_off + t * 3 * 4;
        offset = renders_off + (t + 1) * px * 4;
        episodes.push_back({{"steps", t},
                            {"states_off", states_off},
                            {"actions_off", actions_off},
                            {"renders_off", renders_off},
                            {"annotations", anns}});
    }
    c.header = {{"version", 1},
                {"scalar", "f32"},
                {"env", env_to_json(env)},
                {"p_label", ds.config.p_label},
                {"action_noise", ds.config.action_noise},
                {"tasks_per_episode", ds.config.tasks_per_episode},
                {"max_task_steps", ds.config.max_task_steps},
                {"vocab", vocabulary().words},
                {"episodes", episodes}};

    c.payload.reserve(offset);
    std::vector<float> tmp;
    for (const auto& ep : ds.episodes) {
        tmp.resize(sdim);
        for (const auto& s : ep.states) {
            s.to_floats(tmp.data(), env.blocks);
            put_f32_span(c.payload, tmp.data(), sdim);
        }
        for (const auto& a : ep.actions) {
            const float v[3] = {static_cast<float>(a[0]), static_cast<float>(a[1]), static_cast<float>(a[2])};
            put_f32_span(c.payload, v, 3);
        }
        put_f32_span(c.payload, ep.renders.data(), ep.renders.size());
    }
    write_container(path, c);
}

Dataset load_dataset(const std::string& path) {
    Container c = read_container(path, kDatasetMagic);
    if (c.header.value("version", 0) != 1) throw IoError(path + ": unsupported dataset version");
    if (c.header.value("scalar", "") != std::string("f32")) throw IoError(path + ": unsupported scalar type");

    Dataset ds;
    ds.config.env = env_from_json(c.header.at("env"));
    ds.config.p_label = c.header.value("p_label", 0.02);
    ds.config.action_noise = c.header.value("action_noise", 0.08);
    ds.config.tasks_per_episode = c.header.value("tasks_per_episode", size_t{6});
    ds.config.max_task_steps = c.header.value("max_task_steps", size_t{200});

    const EnvConfig& env = ds.config.env;
    const size_t sdim = env.state_dim();
    const size_t px = env.image_size * env.image_size * env.views;
    const auto& episodes = c.header.at("episodes");
    ds.config.episodes = episodes.size();
    ds.episodes.reserve(episodes.size());

    const auto f32_at = [&](size_t byte_off) -> const float* {
        if (byte_off + 4 > c.payload.size() && byte_off != c.payload.size())
            throw TruncationError(path + ": episode offset outside payload");
        return reinterpret_cast<const float*>(c.payload.data() + byte_off);
    };

    for (const auto& je : episodes) {
        PlayEpisode ep;
        const size_t t = je.at("steps").get<size_t>();
        const size_t states_off = je.at("states_off").get<size_t>();
        const size_t actions_off = je.at("actions_off").get<size_t>();
        const size_t renders_off = je.at("renders_off").get<size_t>();
        if (renders_off + (t + 1) * px * 4 > c.payload.size())
            throw TruncationError(path + ": episode payload exceeds file");

        ep.states.reserve(t + 1);
        for (size_t i = 0; i <= t; ++i)
            ep.states.push_back(EnvState::from_floats(f32_at(states_off + i * sdim * 4), env.blocks));
        ep.actions.reserve(t);
        const float* pa = f32_at(actions_off);
        for (size_t i = 0; i < t; ++i) ep.actions.push_back({pa[3 * i], pa[3 * i + 1], pa[3 * i + 2]});
        ep.renders.resize((t + 1) * px);
        std::memcpy(ep.renders.data(), f32_at(renders_off), ep.renders.size() * 4);

        for (const auto& ja : je.at("annotations")) {
            Annotation a;
            a.start = ja.at("start").get<size_t>();
            a.end = ja.at("end").get<size_t>();
            a.task_id = ja.at("task").get<size_t>();
            a.tokens = ja.at("tokens").get<std::vector<uint16_t>>();
            if (a.end > t || a.start >= a.end) throw IoError(path + ": annotation interval out of bounds");
            ep.annotations.push_back(std::move(a));
        }
        ds.episodes.push_back(std::move(ep));
    }
    return ds;
}

Dataset generate_dataset(const PlaygenConfig& config, uint64_t seed) {
    Dataset ds;
    ds.config = config;
    ds.episodes.reserve(config.episodes);
    for (size_t e = 0; e < config.episodes; ++e) {
        Rng rng(Rng::derive(seed, 0x9d0d5e1ull, e));
        ds.episodes.push_back(generate_play_episode(rng, config.tasks_per_episode, config));
    }
    return ds;
}

}  // namespace mdt::play
