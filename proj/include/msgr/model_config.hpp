#pragma once

#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "config.hpp"

namespace msgr {

// Pooling grids used to build the per-level node sets; a node count of N uses
// the first N entries.
inline constexpr int kPoolGrids[5] = {1, 2, 3, 4, 6};

// Hyperparameters that fix the network shape. A checkpoint embeds these, so a
// stitch/eval run needs no separate config file.
struct ModelConfig {
    // Per-modality encoder widths, coarsest level first (level 1 .. level 4).
    std::vector<int> channels{16, 32, 64, 128};
    int num_nodes = 5;        // N: nodes per view and level
    int num_levels = 3;       // T: progressive alignment levels (level 4 feeds warping)
    int node_dim = 64;        // d: node embedding channels
    int head_hidden = 256;    // width of the regression head's hidden layer
    double offset_scale = 1.0; // multiplier from raw head outputs to pixel offsets
    int sgr_key_side = 16;    // keys/values pooled to <= side x side sites; dense below

    static ModelConfig paper_preset() { return ModelConfig{}; }

    // Reduced preset for quick runs on small images: half channels, fewer
    // nodes/levels, and a raw-output scale that lets a freshly zeroed head
    // reach useful pixel offsets quickly.
    static ModelConfig desk_preset() {
        ModelConfig c;
        c.channels = {8, 16, 32, 64};
        c.num_nodes = 3;
        c.num_levels = 2;
        c.node_dim = 16;
        c.head_hidden = 64;
        c.offset_scale = 8.0;
        c.sgr_key_side = 8;
        return c;
    }

    void validate() const {
        if (channels.size() != 4) throw std::invalid_argument("model: channels must list 4 levels");
        for (int c : channels)
            if (c < 1) throw std::invalid_argument("model: channel counts must be positive");
        if (num_nodes < 1 || num_nodes > 5) throw std::invalid_argument("model: node count must be in [1,5]");
        if (num_levels < 1 || num_levels > 3)
            throw std::invalid_argument("model: progressive levels must be in [1,3]");
        if (node_dim < 1) throw std::invalid_argument("model: node_dim must be positive");
        if (head_hidden < 1) throw std::invalid_argument("model: head_hidden must be positive");
        if (!(offset_scale > 0.0)) throw std::invalid_argument("model: offset_scale must be positive");
        if (sgr_key_side < 1) throw std::invalid_argument("model: sgr_key_side must be positive");
    }

    std::string channels_csv() const {
        std::string s;
        for (std::size_t i = 0; i < channels.size(); ++i) {
            if (i) s += ',';
            s += std::to_string(channels[i]);
        }
        return s;
    }

    void to_meta(std::map<std::string, std::string>& meta) const {
        char buf[64];
        meta["model.channels"] = channels_csv();
        meta["model.nodes"] = std::to_string(num_nodes);
        meta["model.levels"] = std::to_string(num_levels);
        meta["model.node_dim"] = std::to_string(node_dim);
        meta["model.head_hidden"] = std::to_string(head_hidden);
        std::snprintf(buf, sizeof buf, "%.17g", offset_scale);
        meta["model.offset_scale"] = buf;
        meta["model.sgr_key_side"] = std::to_string(sgr_key_side);
    }

    static std::vector<int> parse_int_list(const std::string& s) {
        std::vector<int> out;
        std::stringstream ss(s);
        std::string item;
        while (std::getline(ss, item, ','))
            out.push_back(std::stoi(item));
        return out;
    }

    static ModelConfig from_meta(const std::map<std::string, std::string>& meta) {
        ModelConfig c;
        auto need = [&](const std::string& k) -> const std::string& {
            auto it = meta.find(k);
            if (it == meta.end()) throw std::runtime_error("checkpoint: missing meta key '" + k + "'");
            return it->second;
        };
        c.channels = parse_int_list(need("model.channels"));
        c.num_nodes = std::stoi(need("model.nodes"));
        c.num_levels = std::stoi(need("model.levels"));
        c.node_dim = std::stoi(need("model.node_dim"));
        c.head_hidden = std::stoi(need("model.head_hidden"));
        c.offset_scale = std::stod(need("model.offset_scale"));
        c.sgr_key_side = std::stoi(need("model.sgr_key_side"));
        c.validate();
        return c;
    }

    // Layer a config file over a preset: `model.preset` picks the base, the
    // remaining keys override individual fields.
    static ModelConfig from_config(const Config& cfg) {
        ModelConfig c;
        std::string p = cfg.get_string("model.preset", "paper");
        if (p == "paper")
            c = paper_preset();
        else if (p == "desk")
            c = desk_preset();
        else
            throw std::invalid_argument("model: unknown preset '" + p + "'");
        c.channels = cfg.get_int_list("model.channels", c.channels);
        c.num_nodes = cfg.get_int("model.nodes", c.num_nodes);
        c.num_levels = cfg.get_int("model.levels", c.num_levels);
        c.node_dim = cfg.get_int("model.node_dim", c.node_dim);
        c.head_hidden = cfg.get_int("model.head_hidden", c.head_hidden);
        c.offset_scale = cfg.get_double("model.offset_scale", c.offset_scale);
        c.sgr_key_side = cfg.get_int("model.sgr_key_side", c.sgr_key_side);
        c.validate();
        return c;
    }
};

} // namespace msgr
