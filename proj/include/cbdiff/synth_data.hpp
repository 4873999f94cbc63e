#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cbdiff/diffusion.hpp"
#include "cbdiff/tensor.hpp"

namespace cbdiff {

enum class ForgeryKind { splice, copymove, removal };
enum class Difficulty { easy, ambiguous };

std::string to_string(ForgeryKind k);
std::string to_string(Difficulty d);
ForgeryKind forgery_kind_from_string(const std::string& s);
Difficulty difficulty_from_string(const std::string& s);

struct Sample {
    std::string id;
    Tensor<float> image;  // (H,W,3) in [0,1]
    MaskState mask;       // step 0; channel 1 marks tampered pixels
    ForgeryKind kind = ForgeryKind::splice;
    Difficulty difficulty = Difficulty::easy;
    uint64_t seed = 0;
};

struct DatasetManifest {
    int version = 1;
    int H = 0, W = 0;
    uint64_t global_seed = 0;
    nlohmann::json config;  // provenance: generator settings / run config
    struct Entry {
        std::string id;
        std::string image_path;  // relative to the dataset directory
        std::string mask_path;
        ForgeryKind kind;
        Difficulty difficulty;
        uint64_t seed;
    };
    std::vector<Entry> entries;
};

// Procedural base content: gradient + value-noise texture + 2..5
// anti-aliased shapes. Same seed, same image, bit for bit.
Tensor<float> generate_base_image(uint64_t seed, int H, int W);

// Region geometry of an applied edit; src_* only set for copy-move.
struct ForgeryInfo {
    int dst_x0 = 0, dst_y0 = 0, dst_x1 = 0, dst_y1 = 0;
    int src_x0 = 0, src_y0 = 0, src_x1 = 0, src_y1 = 0;
    bool has_src = false;
};

// Applies one edit and returns (forged image, ground-truth mask).
// Easy samples carry a +0.02 brightness offset on the edited region and
// guarantee {forged != original} == mask exactly; ambiguous samples get
// no offset and a 2-pixel feathered blend at the region edge.
std::pair<Tensor<float>, MaskState> apply_forgery(const Tensor<float>& image, ForgeryKind kind,
                                                  Difficulty difficulty, uint64_t seed,
                                                  ForgeryInfo* info = nullptr);

// Full sample from the dataset-level stream.
Sample make_sample(uint64_t global_seed, int index, int H, int W, double ambiguous_frac);

// Directory layout: manifest.json, images/<id>.png, masks/<id>.png.
DatasetManifest write_dataset(const std::vector<Sample>& samples, const std::string& dir,
                              uint64_t global_seed, const nlohmann::json& config);
std::vector<Sample> read_dataset(const std::string& dir, DatasetManifest* manifest_out = nullptr);
DatasetManifest read_manifest(const std::string& dir);

}  // namespace cbdiff
