// SPDX-License-Identifier: Apache-2.0
#include "ovd/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "ovd/error.hpp"
#include "ovd/rng.hpp"

namespace ovd {

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    require(res.ec == std::errc() && res.ptr == v.data() + v.size(), ErrorKind::config,
            key + ": expected a number, got '" + v + "'");
    return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    require(res.ec == std::errc() && res.ptr == v.data() + v.size(), ErrorKind::config,
            key + ": expected a non-negative integer, got '" + v + "'");
    return out;
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    fail(ErrorKind::config, key + ": expected true or false, got '" + v + "'");
}

const char* bool_str(bool b) { return b ? "true" : "false"; }

struct Field {
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

using Table = std::map<std::string, Field>;

template <class T>
Field size_field(T RunConfig::*section, std::size_t T::*member) {
    return {[=](const RunConfig& c) { return std::to_string((c.*section).*member); },
            [=](RunConfig& c, const std::string& v) {
                (c.*section).*member = static_cast<std::size_t>(to_u64("", v));
            }};
}

template <class T>
Field u64_field(T RunConfig::*section, std::uint64_t T::*member) {
    return {[=](const RunConfig& c) { return std::to_string((c.*section).*member); },
            [=](RunConfig& c, const std::string& v) { (c.*section).*member = to_u64("", v); }};
}

template <class T>
Field double_field(T RunConfig::*section, double T::*member) {
    return {[=](const RunConfig& c) { return format_double((c.*section).*member); },
            [=](RunConfig& c, const std::string& v) { (c.*section).*member = to_double("", v); }};
}

template <class T>
Field bool_field(T RunConfig::*section, bool T::*member) {
    return {[=](const RunConfig& c) { return std::string(bool_str((c.*section).*member)); },
            [=](RunConfig& c, const std::string& v) { (c.*section).*member = to_bool("", v); }};
}

template <class T>
Field string_field(T RunConfig::*section, std::string T::*member) {
    return {[=](const RunConfig& c) { return (c.*section).*member; },
            [=](RunConfig& c, const std::string& v) { (c.*section).*member = v; }};
}

const Table& table() {
    static const Table t = [] {
        Table m;
        using R = RunConfig;
        m["model.d_model"] = size_field(&R::model, &ModelConfig::d_model);
        m["model.n_layers"] = size_field(&R::model, &ModelConfig::n_layers);
        m["model.n_heads"] = size_field(&R::model, &ModelConfig::n_heads);
        m["model.ffn_mult"] = size_field(&R::model, &ModelConfig::ffn_mult);
        m["model.seed"] = u64_field(&R::model, &ModelConfig::seed);
        m["encoders.width"] = size_field(&R::encoders, &EncoderConfig::width);
        m["encoders.seed"] = u64_field(&R::encoders, &EncoderConfig::seed);

        m["aggregation.variant"] = {
            [](const R& c) { return std::string(to_string(c.aggregation.variant)); },
            [](R& c, const std::string& v) {
                c.aggregation.variant = aggregation_variant_from_string(v);
            }};
        m["aggregation.modes"] = {
            [](const R& c) {
                return std::to_string(c.aggregation.general_mode) + "," +
                       std::to_string(c.aggregation.ego_mode);
            },
            [](R& c, const std::string& v) {
                std::string s = v;
                s.erase(std::remove_if(s.begin(), s.end(),
                                       [](char ch) { return ch == '[' || ch == ']' || ch == ' '; }),
                        s.end());
                const auto comma = s.find(',');
                require(comma != std::string::npos, ErrorKind::config,
                        "aggregation.modes: expected two comma-separated counts");
                c.aggregation.general_mode =
                    static_cast<int>(to_u64("aggregation.modes", s.substr(0, comma)));
                c.aggregation.ego_mode =
                    static_cast<int>(to_u64("aggregation.modes", s.substr(comma + 1)));
            }};
        m["aggregation.granularity"] = {
            [](const R& c) { return std::string(to_string(c.aggregation.granularity)); },
            [](R& c, const std::string& v) {
                c.aggregation.granularity = gate_granularity_from_string(v);
            }};
        m["aggregation.gate_activation"] = {
            [](const R& c) { return std::string(to_string(c.aggregation.activation)); },
            [](R& c, const std::string& v) {
                c.aggregation.activation = gate_activation_from_string(v);
            }};
        m["aggregation.hidden"] = size_field(&R::aggregation, &AggregationConfig::hidden);

        m["dropping.policy"] = {
            [](const R& c) { return std::string(to_string(c.dropping.policy)); },
            [](R& c, const std::string& v) { c.dropping.policy = placement_policy_from_string(v); }};
        m["dropping.beta"] = double_field(&R::dropping, &DroppingConfig::beta);
        m["dropping.scale_by_r"] = bool_field(&R::dropping, &DroppingConfig::scale_by_r);
        m["dropping.selection"] = {
            [](const R& c) { return std::string(to_string(c.dropping.selection)); },
            [](R& c, const std::string& v) { c.dropping.selection = selection_mode_from_string(v); }};
        m["dropping.seed"] = u64_field(&R::dropping, &DroppingConfig::seed);

        m["slow_path.enabled"] = bool_field(&R::slow_path, &SlowPathConfig::enabled);
        m["slow_path.grid"] = {
            [](const R& c) { return std::string(to_string(c.slow_path.grid)); },
            [](R& c, const std::string& v) { c.slow_path.grid = grid_mode_from_string(v); }};
        m["slow_path.box"] = bool_field(&R::slow_path, &SlowPathConfig::box);
        m["slow_path.jitter"] = bool_field(&R::slow_path, &SlowPathConfig::jitter);
        m["slow_path.jitter_seed"] = u64_field(&R::slow_path, &SlowPathConfig::jitter_seed);
        m["slow_path.train_with_template"] =
            bool_field(&R::slow_path, &SlowPathConfig::train_with_template);

        m["stream.w"] = double_field(&R::stream, &StreamConfig::w);
        m["stream.supervise_in_response"] =
            bool_field(&R::stream, &StreamConfig::supervise_in_response);
        m["stream.supervise_after_query"] =
            bool_field(&R::stream, &StreamConfig::supervise_after_query);
        m["stream.respond_threshold"] = double_field(&R::stream, &StreamConfig::respond_threshold);

        m["generate.max_len"] = size_field(&R::generate, &GenerateConfig::max_len);

        m["data.seed"] = u64_field(&R::data, &DataConfig::seed);
        m["data.episodes"] = size_field(&R::data, &DataConfig::episodes);
        m["data.heldout_seed"] = u64_field(&R::data, &DataConfig::heldout_seed);
        m["data.heldout_episodes"] = size_field(&R::data, &DataConfig::heldout_episodes);
        m["data.duration"] = double_field(&R::data, &DataConfig::duration);
        m["data.event_rate"] = double_field(&R::data, &DataConfig::event_rate);
        m["data.query_at_start"] = bool_field(&R::data, &DataConfig::query_at_start);
        m["data.augment"] = string_field(&R::data, &DataConfig::augment);
        m["data.augment_fraction"] = double_field(&R::data, &DataConfig::augment_fraction);
        m["data.background"] = double_field(&R::data, &DataConfig::background);
        m["data.noise"] = double_field(&R::data, &DataConfig::noise);

        m["train.steps"] = size_field(&R::train, &TrainConfig::steps);
        m["train.batch"] = size_field(&R::train, &TrainConfig::batch);
        m["train.lr"] = double_field(&R::train, &TrainConfig::lr);
        m["train.weight_decay"] = double_field(&R::train, &TrainConfig::weight_decay);
        m["train.clip"] = double_field(&R::train, &TrainConfig::clip);
        m["train.warmup_frac"] = double_field(&R::train, &TrainConfig::warmup_frac);
        m["train.seed"] = u64_field(&R::train, &TrainConfig::seed);
        m["train.log_every"] = size_field(&R::train, &TrainConfig::log_every);

        m["metrics.include_corrupted"] = bool_field(&R::metrics, &MetricsConfig::include_corrupted);
        m["metrics.ppl_positions"] = string_field(&R::metrics, &MetricsConfig::ppl_positions);
        m["metrics.unmatched_penalty"] =
            string_field(&R::metrics, &MetricsConfig::unmatched_penalty);
        return m;
    }();
    return t;
}

// accepted spellings that map onto a canonical key
const std::map<std::string, std::string>& aliases() {
    static const std::map<std::string, std::string> a = {
        {"router.scale_by_r", "dropping.scale_by_r"},
    };
    return a;
}

const Field& field(const std::string& key) {
    std::string k = key;
    if (auto it = aliases().find(k); it != aliases().end()) k = it->second;
    auto it = table().find(k);
    require(it != table().end(), ErrorKind::config, "unknown config key '" + key + "'");
    return it->second;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
    try {
        field(key).set(*this, trim(value));
    } catch (const Error& e) {
        if (e.kind() != ErrorKind::config) throw;
        std::string msg = e.message();
        if (msg.rfind(':', 0) == 0) msg = msg.substr(1);
        if (msg.rfind(key, 0) != 0) msg = key + ": " + trim(msg);
        fail(ErrorKind::config, msg);
    }
}

std::string RunConfig::get(const std::string& key) const { return field(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
    static const std::vector<std::string> k = [] {
        std::vector<std::string> out;
        for (const auto& [name, f] : table()) out.push_back(name);
        return out;
    }();
    return k;
}

void RunConfig::validate() const {
    validate_model(model);
    require(encoders.width > 0, ErrorKind::config, "encoders.width must be positive");
    validate_aggregation(aggregation);
    validate_dropping(dropping);
    placement_layers(model.n_layers, dropping.policy);
    require(stream.w >= 0.0, ErrorKind::config, "stream.w must be non-negative");
    require(stream.respond_threshold > 0.0 && stream.respond_threshold < 1.0, ErrorKind::config,
            "stream.respond_threshold must lie in (0, 1)");
    require(generate.max_len > 0, ErrorKind::config, "generate.max_len must be positive");
    require(data.duration >= 1.0, ErrorKind::config, "data.duration must be at least 1 s");
    require(data.event_rate >= 0.0, ErrorKind::config, "data.event_rate must be non-negative");
    require(data.augment_fraction >= 0.0 && data.augment_fraction <= 1.0, ErrorKind::config,
            "data.augment_fraction must lie in [0, 1]");
    require(data.noise >= 0.0 && data.background >= 0.0, ErrorKind::config,
            "data.noise and data.background must be non-negative");
    require(train.batch > 0, ErrorKind::config, "train.batch must be positive");
    require(train.lr >= 0.0, ErrorKind::config, "train.lr must be non-negative");
    require(train.clip > 0.0, ErrorKind::config, "train.clip must be positive");
    require(train.warmup_frac >= 0.0 && train.warmup_frac < 1.0, ErrorKind::config,
            "train.warmup_frac must lie in [0, 1)");
    require(metrics.ppl_positions == "all" || metrics.ppl_positions == "lm_only",
            ErrorKind::config, "metrics.ppl_positions must be all or lm_only");
    if (metrics.unmatched_penalty != "stream_end") {
        const double p = to_double("metrics.unmatched_penalty", metrics.unmatched_penalty);
        require(p >= 0.0, ErrorKind::config, "metrics.unmatched_penalty must be non-negative");
    }
    // strategy names are checked where the augmentation runs; reject typos early
    std::stringstream ss(data.augment);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        require(item == "none" || item == "corrupt_message" || item == "temporal_jitter" ||
                    item == "drop_message",
                ErrorKind::config, "unknown augmentation strategy '" + item + "'");
    }
}

std::string RunConfig::dump() const {
    std::string out;
    for (const auto& [name, f] : table()) out += name + " = " + f.get(*this) + "\n";
    return out;
}

std::uint64_t RunConfig::hash() const { return fnv1a(dump()); }

std::string RunConfig::hash_hex() const { return hex64(hash()); }

RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
    RunConfig c;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        require(eq != std::string::npos, ErrorKind::config,
                origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        try {
            c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::config) throw;
            fail(ErrorKind::config, origin + ":" + std::to_string(lineno) + ": " + e.message());
        }
    }
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::config, "cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
}

void apply_overrides(RunConfig& config, const std::vector<std::string>& overrides) {
    for (const std::string& o : overrides) {
        const auto eq = o.find('=');
        require(eq != std::string::npos, ErrorKind::config,
                "override '" + o + "' is not of the form key=value");
        config.set(trim(o.substr(0, eq)), trim(o.substr(eq + 1)));
    }
    config.validate();
}

}  // namespace ovd
