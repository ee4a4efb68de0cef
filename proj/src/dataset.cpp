#include "dcv/dataset.hpp"

#include "dcv/hash.hpp"
#include "dcv/rng.hpp"

#include <nlohmann/json.hpp>
#include <png.h>

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

namespace dcv {

namespace fs = std::filesystem;
using nlohmann::json;

void SyntheticVideoSpec::validate() const {
    if (n_clips < 1) throw ConfigError("empty dataset: n_clips must be >= 1");
    if (n_val < 1) throw ConfigError("n_val must be >= 1");
    if (frames < 1 || height < 4 || width < 4) throw ConfigError("synthetic clips need T >= 1 and H, W >= 4");
    if (!(max_velocity >= 0.0)) throw ConfigError("max_velocity must be non-negative");
    if (max_objects < 1) throw ConfigError("max_objects must be >= 1");
    if (frame_rate < 1) throw ConfigError("frame_rate must be positive");
}

int worker_threads() {
    const char* env = std::getenv("DCVLAB_THREADS");
    if (!env || !*env) return 1;
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (*end != '\0' || n < 1) throw ConfigError(std::string("DCVLAB_THREADS must be a positive integer, got '") + env + "'");
    return int(std::min<long>(n, 64));
}

namespace {

enum Motif : Index { rect = 0, circle = 1, glyph = 2 };

struct Object {
    Motif motif = rect;
    double x = 0, y = 0;  // centre
    double vx = 0, vy = 0;
    double size = 0;      // side or diameter
    std::array<float, 3> color{};
    std::uint16_t cells = 0;  // glyph bitmap, 4x4
};

// Fractional coverage of pixel (px, py) from a signed distance (negative inside).
double coverage(double signed_distance) { return std::clamp(0.5 - signed_distance, 0.0, 1.0); }

double box_distance(double px, double py, double cx, double cy, double half) {
    return std::max(std::abs(px - cx), std::abs(py - cy)) - half;
}

double object_coverage(const Object& o, double px, double py) {
    switch (o.motif) {
        case rect:
            return coverage(box_distance(px, py, o.x, o.y, o.size / 2));
        case circle:
            return coverage(std::hypot(px - o.x, py - o.y) - o.size / 2);
        case glyph: {
            const double cell = o.size / 4;
            double best = 0.0;
            for (int r = 0; r < 4; ++r)
                for (int c = 0; c < 4; ++c) {
                    if (!(o.cells >> (r * 4 + c) & 1u)) continue;
                    const double cx = o.x - o.size / 2 + (c + 0.5) * cell;
                    const double cy = o.y - o.size / 2 + (r + 0.5) * cell;
                    best = std::max(best, coverage(box_distance(px, py, cx, cy, cell / 2)));
                }
            return best;
        }
    }
    return 0.0;
}

// Reflects the centre off the frame walls.
void advance(Object& o, double H, double W) {
    o.x += o.vx;
    o.y += o.vy;
    const double lo = o.size / 2;
    if (o.x < lo) { o.x = 2 * lo - o.x; o.vx = -o.vx; }
    if (o.x > W - lo) { o.x = 2 * (W - lo) - o.x; o.vx = -o.vx; }
    if (o.y < lo) { o.y = 2 * lo - o.y; o.vy = -o.vy; }
    if (o.y > H - lo) { o.y = 2 * (H - lo) - o.y; o.vy = -o.vy; }
    o.x = std::clamp(o.x, lo, W - lo);
    o.y = std::clamp(o.y, lo, H - lo);
}

std::string clip_name(const char* prefix, Index i) {
    std::ostringstream os;
    os << prefix << '_' << std::setw(4) << std::setfill('0') << i;
    return os.str();
}

std::vector<LabeledClip> render_split(const SyntheticVideoSpec& spec, const std::vector<std::uint64_t>& seeds,
                                      const char* prefix) {
    std::vector<LabeledClip> out(seeds.size());
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i = next++; i < seeds.size(); i = next++)
            out[i] = render_synthetic_clip(spec, seeds[i], clip_name(prefix, Index(i)));
    };
    const int n = std::min<int>(worker_threads(), int(seeds.size()));
    std::vector<std::thread> pool;
    for (int k = 1; k < n; ++k) pool.emplace_back(work);
    work();
    for (auto& th : pool) th.join();
    return out;
}

}  // namespace

LabeledClip render_synthetic_clip(const SyntheticVideoSpec& spec, std::uint64_t clip_seed, std::string name) {
    Rng rng(clip_seed);
    const double H = double(spec.height), W = double(spec.width);
    const double lo_size = std::max(3.0, std::min(H, W) / 5), hi_size = std::max(lo_size, std::min(H, W) / 2.5);

    std::array<float, 3> bg0{}, bg1{};
    for (int k = 0; k < 3; ++k) {
        bg0[std::size_t(k)] = float(rng.uniform(-0.9, 0.3));
        bg1[std::size_t(k)] = float(rng.uniform(-0.9, 0.3));
    }

    std::vector<Object> objects(std::size_t(rng.integer(1, spec.max_objects)));
    for (auto& o : objects) {
        o.motif = Motif(rng.integer(0, kNumMotifClasses - 1));
        o.size = rng.uniform(lo_size, hi_size);
        o.x = rng.uniform(o.size / 2, W - o.size / 2);
        o.y = rng.uniform(o.size / 2, H - o.size / 2);
        o.vx = rng.uniform(-spec.max_velocity, spec.max_velocity);
        o.vy = rng.uniform(-spec.max_velocity, spec.max_velocity);
        for (auto& ch : o.color) ch = float(rng.uniform(-0.2, 0.95));
        o.cells = std::uint16_t(rng.next() & 0xffffu);
        if (o.cells == 0) o.cells = 0x9669;
    }
    const auto largest = std::max_element(objects.begin(), objects.end(),
                                          [](const Object& a, const Object& b) { return a.size < b.size; });

    Tensor<float> frames(Shape{spec.frames, spec.height, spec.width, 3});
    for (Index t = 0; t < spec.frames; ++t) {
        float* px = frames.ptr() + t * spec.height * spec.width * 3;
        for (Index y = 0; y < spec.height; ++y)
            for (Index x = 0; x < spec.width; ++x) {
                const double ramp = double(x + y) / double(spec.height + spec.width - 2);
                std::array<double, 3> c{};
                for (std::size_t k = 0; k < 3; ++k) c[k] = (1 - ramp) * bg0[k] + ramp * bg1[k];
                for (const auto& o : objects) {
                    const double a = object_coverage(o, double(x) + 0.5, double(y) + 0.5);
                    if (a <= 0) continue;
                    for (std::size_t k = 0; k < 3; ++k) c[k] = (1 - a) * c[k] + a * o.color[k];
                }
                for (std::size_t k = 0; k < 3; ++k) px[(y * spec.width + x) * 3 + Index(k)] = pixel_from_u8(pixel_to_u8(float(c[k])));
            }
        for (auto& o : objects) advance(o, H, W);
    }

    LabeledClip out;
    out.name = std::move(name);
    out.clip = VideoClip(std::move(frames), spec.frame_rate);
    out.label = Index(largest->motif);
    out.seed = clip_seed;
    return out;
}

Dataset generate_synthetic_dataset(const SyntheticVideoSpec& spec) {
    spec.validate();
    // Even streams feed training clips, odd streams validation clips.
    std::vector<std::uint64_t> train_seeds, val_seeds;
    for (Index i = 0; i < spec.n_clips; ++i) train_seeds.push_back(Rng::mix(spec.seed ^ Rng::mix(std::uint64_t(2 * i))));
    for (Index i = 0; i < spec.n_val; ++i) val_seeds.push_back(Rng::mix(spec.seed ^ Rng::mix(std::uint64_t(2 * i + 1))));
    Dataset data;
    data.spec = spec;
    data.train = render_split(spec, train_seeds, "train");
    data.val = render_split(spec, val_seeds, "val");
    return data;
}

std::string dataset_checksum(const Dataset& data) {
    Sha256 h;
    for (const auto* split : {&data.train, &data.val})
        for (const auto& c : *split) {
            h.update(c.name);
            h.update(c.clip.frames.ptr(), std::size_t(c.clip.frames.numel()) * sizeof(float));
        }
    return h.hex_digest();
}

// ---- PNG ---------------------------------------------------------------------

void write_png(const fs::path& path, const VideoClip& clip, Index frame) {
    const Index n = clip.height() * clip.width() * 3;
    std::vector<unsigned char> bytes(static_cast<std::size_t>(n));
    const float* src = clip.frame_ptr(frame);
    for (Index i = 0; i < n; ++i) bytes[std::size_t(i)] = pixel_to_u8(src[i]);
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = png_uint_32(clip.width());
    image.height = png_uint_32(clip.height());
    image.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&image, path.c_str(), 0, bytes.data(), 0, nullptr))
        throw std::runtime_error("cannot write " + path.string() + ": " + image.message);
}

VideoClip ingest_frame_directory(const fs::path& dir, Index expected_height, Index expected_width, int frame_rate) {
    if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        std::string ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return char(std::tolower(ch)); });
        if (ext == ".png") files.push_back(entry.path());
    }
    if (files.empty()) throw std::runtime_error("empty frame directory: " + dir.string());
    std::sort(files.begin(), files.end(), [](const fs::path& a, const fs::path& b) {
        return a.filename().string() < b.filename().string();
    });

    Index H = expected_height, W = expected_width;
    std::vector<float> values;
    for (const auto& file : files) {
        png_image image{};
        image.version = PNG_IMAGE_VERSION;
        if (!png_image_begin_read_from_file(&image, file.c_str()))
            throw std::runtime_error("unreadable frame " + file.string() + ": " + image.message);
        if (H == 0 && W == 0) {
            H = Index(image.height);
            W = Index(image.width);
        }
        if (Index(image.height) != H || Index(image.width) != W) {
            png_image_free(&image);
            throw ShapeError("frame size mismatch in " + file.string() + ": " + std::to_string(image.height) + "x" +
                             std::to_string(image.width) + ", expected " + std::to_string(H) + "x" +
                             std::to_string(W));
        }
        image.format = PNG_FORMAT_RGB;
        std::vector<unsigned char> bytes(PNG_IMAGE_SIZE(image));
        if (!png_image_finish_read(&image, nullptr, bytes.data(), 0, nullptr))
            throw std::runtime_error("unreadable frame " + file.string() + ": " + image.message);
        for (unsigned char b : bytes) values.push_back(pixel_from_u8(b));
    }
    Tensor<float> frames(Shape{Index(files.size()), H, W, 3});
    std::copy(values.begin(), values.end(), frames.ptr());
    return VideoClip(std::move(frames), frame_rate);
}

// ---- dataset directories -----------------------------------------------------------

namespace {

json spec_to_json(const SyntheticVideoSpec& s) {
    return {{"n_clips", s.n_clips},         {"n_val", s.n_val},     {"frames", s.frames},
            {"height", s.height},           {"width", s.width},     {"max_velocity", s.max_velocity},
            {"max_objects", s.max_objects}, {"frame_rate", s.frame_rate}, {"seed", s.seed}};
}

SyntheticVideoSpec spec_from_json(const json& j) {
    SyntheticVideoSpec s;
    s.n_clips = j.at("n_clips");
    s.n_val = j.at("n_val");
    s.frames = j.at("frames");
    s.height = j.at("height");
    s.width = j.at("width");
    s.max_velocity = j.at("max_velocity");
    s.max_objects = j.at("max_objects");
    s.frame_rate = j.at("frame_rate");
    s.seed = j.at("seed");
    return s;
}

std::string frame_file(Index t) {
    std::ostringstream os;
    os << "frame_" << std::setw(4) << std::setfill('0') << t << ".png";
    return os.str();
}

}  // namespace

void save_dataset(const Dataset& data, const fs::path& dir) {
    json manifest;
    manifest["format"] = "dcvlab-dataset";
    manifest["version"] = 1;
    manifest["spec"] = spec_to_json(data.spec);
    for (const auto& [split, clips] : {std::pair{"train", &data.train}, std::pair{"val", &data.val}}) {
        json list = json::array();
        for (const auto& c : *clips) {
            const fs::path clip_dir = dir / split / c.name;
            fs::create_directories(clip_dir);
            for (Index t = 0; t < c.clip.frames_count(); ++t) write_png(clip_dir / frame_file(t), c.clip, t);
            list.push_back({{"name", c.name}, {"seed", c.seed}, {"label", c.label}, {"frames", c.clip.frames_count()}});
        }
        manifest[split] = list;
    }
    manifest["checksum"] = dataset_checksum(data);
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

Dataset load_dataset(const fs::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw std::runtime_error("missing dataset manifest: " + (dir / "manifest.json").string());
    const json manifest = json::parse(in);
    Dataset data;
    data.spec = spec_from_json(manifest.at("spec"));
    for (const auto& [split, clips] : {std::pair{"train", &data.train}, std::pair{"val", &data.val}})
        for (const auto& entry : manifest.at(split)) {
            LabeledClip c;
            c.name = entry.at("name");
            c.seed = entry.at("seed");
            c.label = entry.at("label");
            c.clip = ingest_frame_directory(dir / split / c.name, data.spec.height, data.spec.width,
                                            data.spec.frame_rate);
            clips->push_back(std::move(c));
        }
    return data;
}

}  // namespace dcv
