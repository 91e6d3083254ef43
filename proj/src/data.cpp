#include "opmatch/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>
#include <png.h>

#include "opmatch/io.hpp"

namespace opmatch::data {

namespace {

void check(bool ok, const std::string& msg) {
    if (!ok) throw DataError(msg);
}

bool has_suffix(const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() &&
           s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

Tensor load_pgm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), path + ": cannot open");
    std::string magic;
    int64_t w = 0, h = 0, maxval = 0;
    f >> magic;
    check(magic == "P5", path + ": only binary PGM (P5) supported");
    // skip comments
    auto next_int = [&]() {
        for (;;) {
            int c = f.peek();
            if (c == '#') {
                std::string line;
                std::getline(f, line);
            } else if (std::isspace(c)) {
                f.get();
            } else {
                break;
            }
        }
        int64_t v;
        f >> v;
        return v;
    };
    w = next_int();
    h = next_int();
    maxval = next_int();
    f.get();  // single whitespace after header
    check(w > 0 && h > 0 && (maxval == 255 || maxval == 65535),
          path + ": bad PGM header");
    int64_t bytes = maxval == 255 ? 1 : 2;
    std::vector<unsigned char> buf((size_t)(w * h * bytes));
    f.read((char*)buf.data(), (std::streamsize)buf.size());
    check(f.gcount() == (std::streamsize)buf.size(), path + ": truncated PGM");
    std::vector<double> v((size_t)(w * h));
    for (int64_t i = 0; i < w * h; ++i) {
        double raw = bytes == 1 ? buf[(size_t)i]
                                : (buf[(size_t)(2 * i)] << 8 | buf[(size_t)(2 * i + 1)]);
        v[(size_t)i] = 2.0 * raw / (double)maxval - 1.0;
    }
    return Tensor::from_data({1, h, w}, std::move(v));
}

void save_pgm(const std::string& path, const Tensor& img, int bit_depth) {
    check(img.rank() == 3 && img.dim(0) == 1, "save_image: PGM is single-channel");
    int64_t h = img.dim(1), w = img.dim(2);
    int64_t maxval = bit_depth == 16 ? 65535 : 255;
    std::ofstream f(path, std::ios::binary);
    check(f.good(), path + ": cannot open for writing");
    f << "P5\n" << w << " " << h << "\n" << maxval << "\n";
    for (int64_t i = 0; i < h * w; ++i) {
        double x = std::clamp(img.data()[(size_t)i], -1.0, 1.0);
        int64_t q = (int64_t)std::lround((x + 1.0) / 2.0 * (double)maxval);
        if (bit_depth == 16) f.put((char)(q >> 8));
        f.put((char)(q & 0xff));
    }
}

struct PngReadCtx {
    FILE* fp = nullptr;
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngReadCtx() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        if (fp) std::fclose(fp);
    }
};

Tensor load_png(const std::string& path) {
    PngReadCtx c;
    c.fp = std::fopen(path.c_str(), "rb");
    check(c.fp != nullptr, path + ": cannot open");
    unsigned char sig[8];
    check(std::fread(sig, 1, 8, c.fp) == 8 && !png_sig_cmp(sig, 0, 8),
          path + ": not a PNG file");
    c.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    c.info = png_create_info_struct(c.png);
    check(c.png && c.info, "libpng init failed");
    if (setjmp(png_jmpbuf(c.png))) throw DataError(path + ": PNG decode error");
    png_init_io(c.png, c.fp);
    png_set_sig_bytes(c.png, 8);
    png_read_info(c.png, c.info);
    png_uint_32 w, h;
    int depth, color;
    png_get_IHDR(c.png, c.info, &w, &h, &depth, &color, nullptr, nullptr, nullptr);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(c.png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8)
        png_set_expand_gray_1_2_4_to_8(c.png);
    if (png_get_valid(c.png, c.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(c.png);
    png_set_strip_alpha(c.png);
    png_read_update_info(c.png, c.info);
    int64_t C = png_get_channels(c.png, c.info);
    depth = png_get_bit_depth(c.png, c.info);
    check(C == 1 || C == 3, path + ": unsupported channel count");
    double maxval = depth == 16 ? 65535.0 : 255.0;
    std::vector<png_byte> row(png_get_rowbytes(c.png, c.info));
    std::vector<double> v((size_t)(C * h * w));
    for (png_uint_32 y = 0; y < h; ++y) {
        png_read_row(c.png, row.data(), nullptr);
        for (png_uint_32 x = 0; x < w; ++x)
            for (int64_t ch = 0; ch < C; ++ch) {
                double raw = depth == 16
                                 ? (row[(x * C + ch) * 2] << 8 | row[(x * C + ch) * 2 + 1])
                                 : row[x * C + ch];
                v[(size_t)(ch * h * w + y * w + x)] = 2.0 * raw / maxval - 1.0;
            }
    }
    png_read_end(c.png, nullptr);
    return Tensor::from_data({C, (int64_t)h, (int64_t)w}, std::move(v));
}

struct PngWriteCtx {
    FILE* fp = nullptr;
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngWriteCtx() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        if (fp) std::fclose(fp);
    }
};

void save_png(const std::string& path, const Tensor& img, int bit_depth) {
    check(img.rank() == 3, "save_image: expected [C,H,W]");
    int64_t C = img.dim(0), h = img.dim(1), w = img.dim(2);
    check(C == 1 || C == 3, "save_image: 1 or 3 channels");
    check(bit_depth == 8 || bit_depth == 16, "save_image: bit depth 8 or 16");
    PngWriteCtx c;
    c.fp = std::fopen(path.c_str(), "wb");
    check(c.fp != nullptr, path + ": cannot open for writing");
    c.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    c.info = png_create_info_struct(c.png);
    check(c.png && c.info, "libpng init failed");
    if (setjmp(png_jmpbuf(c.png))) throw DataError(path + ": PNG encode error");
    png_init_io(c.png, c.fp);
    png_set_IHDR(c.png, c.info, (png_uint_32)w, (png_uint_32)h, bit_depth,
                 C == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(c.png, c.info);
    double maxval = bit_depth == 16 ? 65535.0 : 255.0;
    std::vector<png_byte> row((size_t)(w * C * (bit_depth / 8)));
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x)
            for (int64_t ch = 0; ch < C; ++ch) {
                double v = std::clamp(img.data()[(size_t)(ch * h * w + y * w + x)],
                                      -1.0, 1.0);
                int64_t q = (int64_t)std::lround((v + 1.0) / 2.0 * maxval);
                if (bit_depth == 16) {
                    row[(size_t)((x * C + ch) * 2)] = (png_byte)(q >> 8);
                    row[(size_t)((x * C + ch) * 2 + 1)] = (png_byte)(q & 0xff);
                } else {
                    row[(size_t)(x * C + ch)] = (png_byte)q;
                }
            }
        png_write_row(c.png, row.data());
    }
    png_write_end(c.png, nullptr);
}

// Separable Gaussian smoothing of a [h,w] value array, zero padding.
std::vector<double> gauss_smooth(const std::vector<double>& in, int64_t h,
                                 int64_t w, double sigma) {
    int64_t r = std::max<int64_t>(1, (int64_t)std::ceil(3.0 * sigma));
    std::vector<double> k((size_t)(2 * r + 1));
    double s = 0;
    for (int64_t i = -r; i <= r; ++i) {
        k[(size_t)(i + r)] = std::exp(-(double)(i * i) / (2.0 * sigma * sigma));
        s += k[(size_t)(i + r)];
    }
    for (auto& x : k) x /= s;
    std::vector<double> tmp((size_t)(h * w), 0.0), out((size_t)(h * w), 0.0);
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            double acc = 0;
            for (int64_t i = -r; i <= r; ++i) {
                int64_t xx = x + i;
                if (xx >= 0 && xx < w) acc += k[(size_t)(i + r)] * in[(size_t)(y * w + xx)];
            }
            tmp[(size_t)(y * w + x)] = acc;
        }
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            double acc = 0;
            for (int64_t i = -r; i <= r; ++i) {
                int64_t yy = y + i;
                if (yy >= 0 && yy < h) acc += k[(size_t)(i + r)] * tmp[(size_t)(yy * w + x)];
            }
            out[(size_t)(y * w + x)] = acc;
        }
    return out;
}

}  // namespace

Tensor load_image(const std::string& path) {
    if (has_suffix(path, ".pgm")) return load_pgm(path);
    return load_png(path);
}

void save_image(const std::string& path, const Tensor& img, int bit_depth) {
    if (has_suffix(path, ".pgm")) {
        save_pgm(path, img, bit_depth);
        return;
    }
    save_png(path, img, bit_depth);
}

PatchBatch extract_patches(const Tensor& img, int64_t size, int64_t stride,
                           bool with_coords, int64_t source_id) {
    check(img.rank() == 3, "extract_patches: expected [C,H,W]");
    check(size >= 1 && stride >= 1, "extract_patches: bad size/stride");
    int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
    check(H >= size && W >= size, "extract_patches: image smaller than patch");
    int64_t ny = (H - size) / stride + 1, nx = (W - size) / stride + 1;
    int64_t B = ny * nx;
    std::vector<double> px((size_t)(B * C * size * size));
    std::vector<double> co((size_t)(B * 2));
    int64_t b = 0;
    for (int64_t iy = 0; iy < ny; ++iy)
        for (int64_t ix = 0; ix < nx; ++ix, ++b) {
            int64_t top = iy * stride, left = ix * stride;
            for (int64_t c = 0; c < C; ++c)
                for (int64_t y = 0; y < size; ++y)
                    for (int64_t x = 0; x < size; ++x)
                        px[(size_t)(((b * C + c) * size + y) * size + x)] =
                            img.data()[(size_t)(c * H * W + (top + y) * W + left + x)];
            double cy = (double)top + (double)(size - 1) / 2.0;
            double cx = (double)left + (double)(size - 1) / 2.0;
            co[(size_t)(2 * b)] = H > 1 ? 2.0 * cy / (double)(H - 1) - 1.0 : 0.0;
            co[(size_t)(2 * b + 1)] = W > 1 ? 2.0 * cx / (double)(W - 1) - 1.0 : 0.0;
        }
    PatchBatch out;
    out.pixels = Tensor::from_data({B, C, size, size}, std::move(px));
    if (with_coords) out.coords = Tensor::from_data({B, 2}, std::move(co));
    out.source_ids.assign((size_t)B, source_id);
    return out;
}

Tensor coord_channels(const Tensor& coords, int64_t patch, int64_t image_h,
                      int64_t image_w) {
    check(coords.rank() == 2 && coords.dim(1) == 2,
          "coord_channels: coords must be [B,2]");
    int64_t B = coords.dim(0);
    std::vector<double> v((size_t)(B * 2 * patch * patch));
    for (int64_t b = 0; b < B; ++b) {
        // normalized center -> pixel center -> per-pixel normalized coords
        double cy = (coords.data()[(size_t)(2 * b)] + 1.0) / 2.0 * (image_h - 1);
        double cx = (coords.data()[(size_t)(2 * b + 1)] + 1.0) / 2.0 * (image_w - 1);
        for (int64_t y = 0; y < patch; ++y)
            for (int64_t x = 0; x < patch; ++x) {
                double py = cy - (double)(patch - 1) / 2.0 + (double)y;
                double px = cx - (double)(patch - 1) / 2.0 + (double)x;
                v[(size_t)(((b * 2 + 0) * patch + y) * patch + x)] =
                    2.0 * py / (double)(image_h - 1) - 1.0;
                v[(size_t)(((b * 2 + 1) * patch + y) * patch + x)] =
                    2.0 * px / (double)(image_w - 1) - 1.0;
            }
    }
    return Tensor::from_data({B, 2, patch, patch}, std::move(v));
}

Tensor dropout_coords(const Tensor& coords, double frac, Rng& rng) {
    std::vector<double> v(coords.data());
    int64_t B = coords.dim(0);
    for (int64_t b = 0; b < B; ++b)
        if (rng.uniform() < frac) {
            v[(size_t)(2 * b)] = rng.uniform(-1.0, 1.0);
            v[(size_t)(2 * b + 1)] = rng.uniform(-1.0, 1.0);
        }
    return Tensor::from_data(coords.shape(), std::move(v));
}

Tensor random_motion_kernel(int64_t size, int64_t steps, Rng& rng) {
    check(size >= 3 && size % 2 == 1, "random_motion_kernel: odd size >= 3");
    int64_t c = size / 2;
    std::vector<double> raster((size_t)(size * size), 0.0);
    auto splat = [&](double y, double x, double mass) {
        int64_t y0 = (int64_t)std::floor(y), x0 = (int64_t)std::floor(x);
        double fy = y - (double)y0, fx = x - (double)x0;
        for (int dy = 0; dy <= 1; ++dy)
            for (int dx = 0; dx <= 1; ++dx) {
                int64_t yy = y0 + dy, xx = x0 + dx;
                if (yy < 0 || yy >= size || xx < 0 || xx >= size) continue;
                double w = (dy ? fy : 1.0 - fy) * (dx ? fx : 1.0 - fx);
                raster[(size_t)(yy * size + xx)] += mass * w;
            }
    };
    if (steps == 0) {
        raster[(size_t)(c * size + c)] = 1.0;
    } else {
        double y = (double)c, x = (double)c, vy = 0, vx = 0;
        double lim = (double)size / 2.0 - 1.5;  // keep the walk inside
        for (int64_t s = 0; s <= steps; ++s) {
            splat(y, x, 1.0);
            vy = 0.7 * vy + 0.5 * rng.normal();
            vx = 0.7 * vx + 0.5 * rng.normal();
            y = std::clamp(y + vy, (double)c - lim, (double)c + lim);
            x = std::clamp(x + vx, (double)c - lim, (double)c + lim);
        }
    }
    raster = gauss_smooth(raster, size, size, 0.3);
    // normalize, then iteratively shift the center of mass onto the center
    for (int iter = 0; iter < 40; ++iter) {
        double mass = 0, my = 0, mx = 0;
        for (int64_t y = 0; y < size; ++y)
            for (int64_t x = 0; x < size; ++x) {
                double v = raster[(size_t)(y * size + x)];
                mass += v;
                my += v * (double)y;
                mx += v * (double)x;
            }
        for (auto& v : raster) v /= mass;
        my = my / mass - (double)c;
        mx = mx / mass - (double)c;
        if (std::abs(my) < 1e-9 && std::abs(mx) < 1e-9) break;
        // resample shifted by (-my, -mx) with bilinear interpolation
        std::vector<double> shifted((size_t)(size * size), 0.0);
        for (int64_t y = 0; y < size; ++y)
            for (int64_t x = 0; x < size; ++x) {
                double sy = (double)y + my, sx = (double)x + mx;
                int64_t y0 = (int64_t)std::floor(sy), x0 = (int64_t)std::floor(sx);
                double fy = sy - (double)y0, fx = sx - (double)x0;
                double acc = 0;
                for (int dy = 0; dy <= 1; ++dy)
                    for (int dx = 0; dx <= 1; ++dx) {
                        int64_t yy = y0 + dy, xx = x0 + dx;
                        if (yy < 0 || yy >= size || xx < 0 || xx >= size) continue;
                        acc += (dy ? fy : 1.0 - fy) * (dx ? fx : 1.0 - fx) *
                               raster[(size_t)(yy * size + xx)];
                    }
                shifted[(size_t)(y * size + x)] = acc;
            }
        raster = std::move(shifted);
    }
    double mass = 0;
    for (double v : raster) mass += v;
    for (auto& v : raster) v /= mass;
    return Tensor::from_data({1, size, size}, std::move(raster));
}

Tensor synth_texture(int64_t h, int64_t w, Rng& rng) {
    std::vector<double> base((size_t)(h * w));
    for (auto& x : base) x = rng.normal();
    double sigma = rng.uniform(1.0, 4.0);
    base = gauss_smooth(base, h, w, sigma);
    double m = 0, v = 0;
    for (double x : base) m += x;
    m /= (double)(h * w);
    for (double x : base) v += (x - m) * (x - m);
    v = std::sqrt(v / (double)(h * w)) + 1e-12;
    for (auto& x : base) x = 0.45 * (x - m) / v;
    // shapes: hard edges carry the phase information a blur kernel needs
    int64_t nshapes = 5 + rng.randint(11);
    for (int64_t s = 0; s < nshapes; ++s) {
        double val = rng.uniform(-0.9, 0.9);
        double cy = rng.uniform(0, (double)h), cx = rng.uniform(0, (double)w);
        if (rng.uniform() < 0.5) {
            double ry = rng.uniform(2.0, (double)h / 5.0);
            double rx = rng.uniform(2.0, (double)w / 5.0);
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < w; ++x)
                    if (std::abs((double)y - cy) < ry && std::abs((double)x - cx) < rx)
                        base[(size_t)(y * w + x)] = val;
        } else {
            double r = rng.uniform(2.0, (double)std::min(h, w) / 5.0);
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < w; ++x) {
                    double dy = (double)y - cy, dx = (double)x - cx;
                    if (dy * dy + dx * dx < r * r) base[(size_t)(y * w + x)] = val;
                }
        }
    }
    for (auto& x : base) x = std::clamp(x, -1.0, 1.0);
    return Tensor::from_data({1, h, w}, std::move(base));
}

void generate_corpus(const CorpusSpec& spec, const op::ForwardOperator& truth) {
    check(!spec.clean_sources.empty() && !spec.corrupted_sources.empty(),
          "generate_corpus: empty source list");
    std::set<std::string> clean_set(spec.clean_sources.begin(),
                                    spec.clean_sources.end());
    for (const auto& s : spec.corrupted_sources)
        check(!clean_set.count(s),
              "generate_corpus: clean and corrupted sources overlap: " + s);
    std::filesystem::create_directories(spec.out_dir);
    Rng root(spec.seed);

    int64_t image_h = 0, image_w = 0;
    auto collect = [&](const std::vector<std::string>& sources, bool corrupt,
                       Tensor& patches, Tensor& coords) {
        std::vector<double> px, co;
        int64_t total = 0, C = 0;
        for (size_t idx = 0; idx < sources.size(); ++idx) {
            Tensor img = load_image(sources[idx]);
            if (image_h == 0) {
                image_h = img.dim(1);
                image_w = img.dim(2);
            }
            check(img.dim(1) == image_h && img.dim(2) == image_w,
                  "generate_corpus: all sources must share one extent");
            if (corrupt) {
                // full-image pass through the true operator; a whole image is
                // one patch centered at (0,0) in its own frame
                Rng stream = root.fork((uint64_t)idx + (corrupt ? 1000000 : 0));
                Tensor one = reshape(img, {1, img.dim(0), image_h, image_w});
                Tensor cc = Tensor::from_data({1, 2}, {0.0, 0.0});
                Tensor deg = op::apply(truth, one, stream, &cc);
                img = reshape(deg.detach(), {img.dim(0), deg.dim(2), deg.dim(3)});
            }
            PatchBatch pb =
                extract_patches(img, spec.patch_size, spec.stride, true,
                                (int64_t)idx);
            C = pb.pixels.dim(1);
            px.insert(px.end(), pb.pixels.data().begin(), pb.pixels.data().end());
            co.insert(co.end(), pb.coords->data().begin(), pb.coords->data().end());
            total += pb.pixels.dim(0);
        }
        int64_t p = (int64_t)std::llround(
            std::sqrt((double)((int64_t)px.size() / (total * C))));
        patches = Tensor::from_data({total, C, p, p}, std::move(px));
        coords = Tensor::from_data({total, 2}, std::move(co));
    };

    Tensor clean, clean_co, corr, corr_co;
    collect(spec.clean_sources, false, clean, clean_co);
    collect(spec.corrupted_sources, true, corr, corr_co);

    io::save_tensor(spec.out_dir + "/clean.opmt", clean);
    io::save_tensor(spec.out_dir + "/clean_coords.opmt", clean_co);
    io::save_tensor(spec.out_dir + "/corrupted.opmt", corr);
    io::save_tensor(spec.out_dir + "/corrupted_coords.opmt", corr_co);
    truth.save(spec.out_dir + "/true_op");

    nlohmann::json j;
    j["clean_sources"] = spec.clean_sources;
    j["corrupted_sources"] = spec.corrupted_sources;
    j["patch_size"] = spec.patch_size;
    j["stride"] = spec.stride;
    j["seed"] = spec.seed;
    j["image_h"] = image_h;
    j["image_w"] = image_w;
    j["true_op"] = "true_op";
    std::ofstream f(spec.out_dir + "/manifest.json");
    f << j.dump(2) << "\n";
}

Corpus load_corpus(const std::string& dir) {
    std::ifstream f(dir + "/manifest.json");
    check(f.good(), dir + "/manifest.json: cannot open");
    nlohmann::json j = nlohmann::json::parse(f);
    Corpus c;
    c.clean = io::load_tensor(dir + "/clean.opmt");
    c.clean_coords = io::load_tensor(dir + "/clean_coords.opmt");
    c.corrupted = io::load_tensor(dir + "/corrupted.opmt");
    c.corrupted_coords = io::load_tensor(dir + "/corrupted_coords.opmt");
    c.image_h = j.at("image_h");
    c.image_w = j.at("image_w");
    c.patch_size = j.at("patch_size");
    c.true_op_prefix = dir + "/" + (std::string)j.at("true_op");
    return c;
}

}  // namespace opmatch::data
