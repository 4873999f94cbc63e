#include "cbdiff/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "cbdiff/png_io.hpp"
#include "cbdiff/rng.hpp"

namespace fs = std::filesystem;

namespace cbdiff {

namespace {

[[noreturn]] void fail(const std::string& what) { throw std::runtime_error("synth_data: " + what); }

void check_size(int H, int W) {
    if (H < 32 || W < 32 || H % 8 || W % 8)
        fail("image size must be >= 32 and divisible by 8, got " + std::to_string(H) + "x" +
             std::to_string(W));
}

float clamp01(float v) { return v < 0.f ? 0.f : (v > 1.f ? 1.f : v); }

// value noise: integer lattice hashes, smoothstep-interpolated at render
float value_noise(uint64_t key, int x, int y, int cell) {
    const int gx = x / cell, gy = y / cell;
    const float fx = float(x % cell) / float(cell);
    const float fy = float(y % cell) / float(cell);
    auto lattice = [&](int ix, int iy) {
        return float(unit_at(key, (uint64_t(uint32_t(ix)) << 32) | uint32_t(iy)));
    };
    auto smooth = [](float u) { return u * u * (3.f - 2.f * u); };
    const float sx = smooth(fx), sy = smooth(fy);
    const float a = lattice(gx, gy), b = lattice(gx + 1, gy);
    const float c = lattice(gx, gy + 1), d = lattice(gx + 1, gy + 1);
    return (a + (b - a) * sx) + ((c + (d - c) * sx) - (a + (b - a) * sx)) * sy;
}

struct Region {
    // axis-aligned box [x0,x1) x [y0,y1); elliptical regions are inscribed
    int x0, y0, x1, y1;
    bool ellipse;

    bool contains(int x, int y) const {
        if (x < x0 || x >= x1 || y < y0 || y >= y1) return false;
        if (!ellipse) return true;
        const float cx = 0.5f * float(x0 + x1 - 1), cy = 0.5f * float(y0 + y1 - 1);
        const float rx = 0.5f * float(x1 - x0), ry = 0.5f * float(y1 - y0);
        const float dx = (float(x) - cx) / rx, dy = (float(y) - cy) / ry;
        return dx * dx + dy * dy <= 1.f;
    }
    bool overlaps(const Region& o) const {
        return x0 < o.x1 && o.x0 < x1 && y0 < o.y1 && o.y0 < y1;
    }
};

Region sample_region(RngStream& rs, int H, int W) {
    const double frac = 0.05 + 0.20 * rs.next_unit();   // target area fraction
    const double aspect = 0.6 + 1.0 * rs.next_unit();
    int rw = std::max(4, int(std::lround(W * std::sqrt(frac * aspect))));
    int rh = std::max(4, int(std::lround(H * std::sqrt(frac / aspect))));
    rw = std::min(rw, W - 2);
    rh = std::min(rh, H - 2);
    Region r;
    r.x0 = 1 + int(rs.next_u64() % uint64_t(W - rw - 1));
    r.y0 = 1 + int(rs.next_u64() % uint64_t(H - rh - 1));
    r.x1 = r.x0 + rw;
    r.y1 = r.y0 + rh;
    r.ellipse = (rs.next_u64() & 1) != 0;
    return r;
}

std::vector<uint8_t> region_mask(const Region& r, int H, int W) {
    std::vector<uint8_t> m(size_t(H) * W, 0);
    for (int y = r.y0; y < r.y1; ++y)
        for (int x = r.x0; x < r.x1; ++x)
            if (r.contains(x, y)) m[size_t(y) * W + x] = 1;
    return m;
}

double mask_fraction(const std::vector<uint8_t>& m) {
    int64_t n = 0;
    for (uint8_t v : m) n += v;
    return double(n) / double(m.size());
}

// Chebyshev distance (capped at 3) from a region pixel to the nearest
// outside pixel; drives the ambiguous feather band.
int border_distance(const std::vector<uint8_t>& m, int H, int W, int x, int y) {
    for (int d = 1; d <= 2; ++d)
        for (int dy = -d; dy <= d; ++dy)
            for (int dx = -d; dx <= d; ++dx) {
                if (std::max(std::abs(dx), std::abs(dy)) != d) continue;
                const int nx = x + dx, ny = y + dy;
                if (nx < 0 || nx >= W || ny < 0 || ny >= H) return d;  // image edge counts
                if (!m[size_t(ny) * W + nx]) return d;
            }
    return 3;
}

// Smooth infill: seed the region with the mean of the surrounding ring,
// then relax towards the 4-neighbor average with original pixels fixed.
void smooth_fill(Tensor<float>& img, const std::vector<uint8_t>& m, int H, int W) {
    float ring_mean[3] = {0, 0, 0};
    int64_t ring_n = 0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            if (m[size_t(y) * W + x]) continue;
            bool near = false;
            for (int dy = -1; dy <= 1 && !near; ++dy)
                for (int dx = -1; dx <= 1 && !near; ++dx) {
                    const int nx = x + dx, ny = y + dy;
                    if (nx >= 0 && nx < W && ny >= 0 && ny < H && m[size_t(ny) * W + nx]) near = true;
                }
            if (!near) continue;
            for (int c = 0; c < 3; ++c) ring_mean[c] += img[(int64_t(y) * W + x) * 3 + c];
            ++ring_n;
        }
    if (ring_n == 0) fail("removal region has no surroundings");
    for (int c = 0; c < 3; ++c) ring_mean[c] /= float(ring_n);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (m[size_t(y) * W + x])
                for (int c = 0; c < 3; ++c) img[(int64_t(y) * W + x) * 3 + c] = ring_mean[c];
    for (int iter = 0; iter < 12; ++iter) {
        Tensor<float> prev = img;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                if (!m[size_t(y) * W + x]) continue;
                for (int c = 0; c < 3; ++c) {
                    float acc = 0;
                    int n = 0;
                    const int nx[4] = {x - 1, x + 1, x, x};
                    const int ny[4] = {y, y, y - 1, y + 1};
                    for (int k = 0; k < 4; ++k) {
                        if (nx[k] < 0 || nx[k] >= W || ny[k] < 0 || ny[k] >= H) continue;
                        acc += prev[(int64_t(ny[k]) * W + nx[k]) * 3 + c];
                        ++n;
                    }
                    img[(int64_t(y) * W + x) * 3 + c] = acc / float(n);
                }
            }
    }
}

}  // namespace

std::string to_string(ForgeryKind k) {
    switch (k) {
        case ForgeryKind::splice: return "splice";
        case ForgeryKind::copymove: return "copymove";
        case ForgeryKind::removal: return "removal";
    }
    fail("bad forgery kind");
}

std::string to_string(Difficulty d) { return d == Difficulty::easy ? "easy" : "ambiguous"; }

ForgeryKind forgery_kind_from_string(const std::string& s) {
    if (s == "splice") return ForgeryKind::splice;
    if (s == "copymove") return ForgeryKind::copymove;
    if (s == "removal") return ForgeryKind::removal;
    fail("unknown forgery kind '" + s + "'");
}

Difficulty difficulty_from_string(const std::string& s) {
    if (s == "easy") return Difficulty::easy;
    if (s == "ambiguous") return Difficulty::ambiguous;
    fail("unknown difficulty '" + s + "'");
}

Tensor<float> generate_base_image(uint64_t seed, int H, int W) {
    check_size(H, W);
    RngStream rs(seed, {0x6261736511ull});
    Tensor<float> img({H, W, 3});

    // linear gradient between two colors
    float c0[3], c1[3];
    for (int c = 0; c < 3; ++c) c0[c] = float(rs.next_unit());
    for (int c = 0; c < 3; ++c) c1[c] = float(rs.next_unit());
    const double theta = rs.next_unit() * 6.283185307179586;
    const float gx = float(std::cos(theta)), gy = float(std::sin(theta));
    const uint64_t noise_key1 = rs.next_u64();
    const uint64_t noise_key2 = rs.next_u64();
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const float u = 0.5f + 0.5f * (gx * (float(x) / W - 0.5f) + gy * (float(y) / H - 0.5f));
            const float n1 = value_noise(noise_key1, x, y, 16) - 0.5f;
            const float n2 = value_noise(noise_key2, x, y, 5) - 0.5f;
            for (int c = 0; c < 3; ++c) {
                float v = c0[c] + (c1[c] - c0[c]) * u + 0.30f * n1 + 0.12f * n2;
                img[(int64_t(y) * W + x) * 3 + c] = clamp01(v);
            }
        }

    // 2..5 anti-aliased shapes, painter's order
    const int nshapes = 2 + int(rs.next_u64() % 4);
    for (int sidx = 0; sidx < nshapes; ++sidx) {
        const bool circle = (rs.next_u64() & 1) != 0;
        const float cx = float(rs.next_unit()) * W;
        const float cy = float(rs.next_unit()) * H;
        const float radius = (0.06f + 0.20f * float(rs.next_unit())) * float(std::min(H, W));
        const float ar = 0.5f + float(rs.next_unit());
        float col[3];
        for (int c = 0; c < 3; ++c) col[c] = float(rs.next_unit());
        const float alpha = 0.55f + 0.45f * float(rs.next_unit());
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                float cov;
                if (circle) {
                    const float d = std::sqrt((x - cx) * (x - cx) + (y - cy) * (y - cy));
                    cov = clamp01(radius - d + 0.5f);  // 1px soft edge
                } else {
                    const float hx = radius, hy = radius * ar;
                    const float covx = clamp01(hx - std::abs(x - cx) + 0.5f);
                    const float covy = clamp01(hy - std::abs(y - cy) + 0.5f);
                    cov = std::min(covx, covy) >= 1.f ? 1.f : std::min(covx, covy);
                }
                if (cov <= 0.f) continue;
                const float a = alpha * cov;
                for (int c = 0; c < 3; ++c) {
                    float& px = img[(int64_t(y) * W + x) * 3 + c];
                    px = clamp01(px * (1.f - a) + col[c] * a);
                }
            }
    }
    return img;
}

std::pair<Tensor<float>, MaskState> apply_forgery(const Tensor<float>& image, ForgeryKind kind,
                                                  Difficulty difficulty, uint64_t seed,
                                                  ForgeryInfo* info) {
    if (image.rank() != 3 || image.dim(2) != 3)
        fail("apply_forgery expects (H,W,3), got " + shape_str(image.shape()));
    const int H = image.dim(0), W = image.dim(1);
    check_size(H, W);
    RngStream rs(seed, {0x666f726765ull});

    Region region{};
    Region src{};
    std::vector<uint8_t> m;
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
        region = sample_region(rs, H, W);
        m = region_mask(region, H, W);
        const double frac = mask_fraction(m);
        if (frac < 0.02 || frac > 0.4) continue;
        if (kind == ForgeryKind::copymove) {
            // destination content comes from a disjoint source window
            const int rw = region.x1 - region.x0, rh = region.y1 - region.y0;
            bool found = false;
            for (int t2 = 0; t2 < 100 && !found; ++t2) {
                src = region;
                src.x0 = int(rs.next_u64() % uint64_t(W - rw));
                src.y0 = int(rs.next_u64() % uint64_t(H - rh));
                src.x1 = src.x0 + rw;
                src.y1 = src.y0 + rh;
                if (!src.overlaps(region)) found = true;
            }
            if (!found) continue;
        }
        ok = true;
    }
    if (!ok) fail("region sampling failed after 100 tries");

    Tensor<float> forged = image;
    switch (kind) {
        case ForgeryKind::splice: {
            const Tensor<float> donor =
                generate_base_image(mix64(seed, 0x646f6e6f72ull), H, W);
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    if (m[size_t(y) * W + x])
                        for (int c = 0; c < 3; ++c)
                            forged[(int64_t(y) * W + x) * 3 + c] =
                                donor[(int64_t(y) * W + x) * 3 + c];
            break;
        }
        case ForgeryKind::copymove: {
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    if (m[size_t(y) * W + x]) {
                        const int sy = y - region.y0 + src.y0;
                        const int sx = x - region.x0 + src.x0;
                        for (int c = 0; c < 3; ++c)
                            forged[(int64_t(y) * W + x) * 3 + c] =
                                image[(int64_t(sy) * W + sx) * 3 + c];
                    }
            break;
        }
        case ForgeryKind::removal:
            smooth_fill(forged, m, H, W);
            break;
    }

    if (difficulty == Difficulty::easy) {
        for (int64_t p = 0; p < int64_t(H) * W; ++p) {
            if (!m[size_t(p)]) continue;
            for (int c = 0; c < 3; ++c) forged[p * 3 + c] = clamp01(forged[p * 3 + c] + 0.02f);
            // the learnable trace must also separate forged from original
            bool same = true;
            for (int c = 0; c < 3; ++c) same = same && forged[p * 3 + c] == image[p * 3 + c];
            if (same) forged[p * 3] = image[p * 3] > 0.5f ? image[p * 3] - 0.04f : image[p * 3] + 0.04f;
        }
    } else {
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const int64_t p = int64_t(y) * W + x;
                if (!m[size_t(p)]) continue;
                const int d = border_distance(m, H, W, x, y);
                if (d >= 3) continue;
                const float a = float(d) / 3.f;  // 2-pixel feather band
                for (int c = 0; c < 3; ++c)
                    forged[p * 3 + c] = image[p * 3 + c] * (1.f - a) + forged[p * 3 + c] * a;
            }
    }

    if (info) {
        *info = ForgeryInfo{region.x0, region.y0, region.x1, region.y1,
                            src.x0,    src.y0,    src.x1,    src.y1,
                            kind == ForgeryKind::copymove};
    }
    MaskState mask = MaskState::from_classes(H, W, m, 0);
    return {std::move(forged), std::move(mask)};
}

Sample make_sample(uint64_t global_seed, int index, int H, int W, double ambiguous_frac) {
    Sample s;
    s.seed = mix64(global_seed, uint64_t(index));
    char buf[16];
    std::snprintf(buf, sizeof(buf), "s%05d", index);
    s.id = buf;
    s.kind = static_cast<ForgeryKind>(index % 3);
    s.difficulty = unit_at(mix64(global_seed, 0x616d6269ull), uint64_t(index)) < ambiguous_frac
                       ? Difficulty::ambiguous
                       : Difficulty::easy;
    const Tensor<float> base = generate_base_image(s.seed, H, W);
    auto [forged, mask] = apply_forgery(base, s.kind, s.difficulty, s.seed);
    s.image = std::move(forged);
    s.mask = std::move(mask);
    return s;
}

DatasetManifest write_dataset(const std::vector<Sample>& samples, const std::string& dir,
                              uint64_t global_seed, const nlohmann::json& config) {
    if (samples.empty()) fail("no samples to write");
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "masks");
    DatasetManifest man;
    man.H = samples[0].image.dim(0);
    man.W = samples[0].image.dim(1);
    man.global_seed = global_seed;
    man.config = config;
    for (const auto& s : samples) {
        DatasetManifest::Entry e;
        e.id = s.id;
        e.image_path = "images/" + s.id + ".png";
        e.mask_path = "masks/" + s.id + ".png";
        e.kind = s.kind;
        e.difficulty = s.difficulty;
        e.seed = s.seed;
        write_png_rgb8((fs::path(dir) / e.image_path).string(), quantize_unit(s.image));
        Tensor<uint8_t> mk({man.H, man.W, 1});
        for (int64_t p = 0; p < s.mask.pixels(); ++p)
            mk[p] = s.mask.onehot[p * 2 + kTampered] ? 255 : 0;
        write_png_gray8((fs::path(dir) / e.mask_path).string(), mk);
        man.entries.push_back(std::move(e));
    }
    nlohmann::json j;
    j["version"] = man.version;
    j["H"] = man.H;
    j["W"] = man.W;
    j["global_seed"] = man.global_seed;
    j["config"] = man.config;
    auto& arr = j["samples"] = nlohmann::json::array();
    for (const auto& e : man.entries)
        arr.push_back({{"id", e.id},
                       {"image", e.image_path},
                       {"mask", e.mask_path},
                       {"kind", to_string(e.kind)},
                       {"difficulty", to_string(e.difficulty)},
                       {"seed", e.seed}});
    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out) fail("cannot write manifest in " + dir);
    out << j.dump(2) << "\n";
    return man;
}

DatasetManifest read_manifest(const std::string& dir) {
    const fs::path p = fs::path(dir) / "manifest.json";
    std::ifstream in(p);
    if (!in) fail("missing manifest: " + p.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        fail("corrupt manifest " + p.string() + ": " + e.what());
    }
    DatasetManifest man;
    man.version = j.at("version").get<int>();
    man.H = j.at("H").get<int>();
    man.W = j.at("W").get<int>();
    man.global_seed = j.at("global_seed").get<uint64_t>();
    man.config = j.value("config", nlohmann::json::object());
    for (const auto& e : j.at("samples")) {
        DatasetManifest::Entry entry;
        entry.id = e.at("id").get<std::string>();
        entry.image_path = e.at("image").get<std::string>();
        entry.mask_path = e.at("mask").get<std::string>();
        entry.kind = forgery_kind_from_string(e.at("kind").get<std::string>());
        entry.difficulty = difficulty_from_string(e.at("difficulty").get<std::string>());
        entry.seed = e.at("seed").get<uint64_t>();
        man.entries.push_back(std::move(entry));
    }
    return man;
}

std::vector<Sample> read_dataset(const std::string& dir, DatasetManifest* manifest_out) {
    DatasetManifest man = read_manifest(dir);
    std::vector<Sample> samples;
    samples.reserve(man.entries.size());
    for (const auto& e : man.entries) {
        Sample s;
        s.id = e.id;
        s.kind = e.kind;
        s.difficulty = e.difficulty;
        s.seed = e.seed;
        const auto img = read_png_rgb8((fs::path(dir) / e.image_path).string());
        if (img.dim(0) != man.H || img.dim(1) != man.W)
            fail("image size mismatch for " + e.id + ": " + shape_str(img.shape()));
        s.image = dequantize_unit(img);
        const auto mk = read_png_gray8((fs::path(dir) / e.mask_path).string());
        if (mk.dim(0) != man.H || mk.dim(1) != man.W)
            fail("mask size mismatch for " + e.id);
        std::vector<uint8_t> cls(size_t(man.H) * man.W);
        for (int64_t p = 0; p < int64_t(man.H) * man.W; ++p) cls[size_t(p)] = mk[p] > 127 ? 1 : 0;
        s.mask = MaskState::from_classes(man.H, man.W, cls, 0);
        samples.push_back(std::move(s));
    }
    if (manifest_out) *manifest_out = std::move(man);
    return samples;
}

}  // namespace cbdiff
