#include "spine3d/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace spine3d {

namespace {

unsigned char to_byte(Real v) {
    const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
    return static_cast<unsigned char>(std::lround(c * 255.0));
}

void write_pnm(const std::string& path, const Tensor& img, int channels, const char* magic) {
    check(img.rank() == 3 && img.dim(2) == channels,
          std::string(magic) + " writer needs (h,w," + std::to_string(channels) + "), got " +
              img.shape_str());
    std::ostringstream os;
    os << magic << "\n" << img.dim(1) << " " << img.dim(0) << "\n255\n";
    auto v = img.values();
    for (std::size_t i = 0; i < v.size(); ++i) os.put(static_cast<char>(to_byte(v[i])));
    atomic_write_file(path, os.str());
}

int next_pnm_token(std::istream& in) {
    // skips whitespace and '#' comment lines
    while (true) {
        int ch = in.peek();
        if (ch == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(ch)) {
            in.get();
        } else {
            break;
        }
    }
    int value = -1;
    in >> value;
    return value;
}

Tensor read_pnm(const std::string& path, int channels, const char* magic) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PipelineError("cannot open " + path);
    std::string m;
    in >> m;
    if (m != magic) throw PipelineError(path + ": expected " + magic + " header, got " + m);
    const int w = next_pnm_token(in);
    const int h = next_pnm_token(in);
    const int maxv = next_pnm_token(in);
    if (w <= 0 || h <= 0 || maxv != 255) throw PipelineError(path + ": unsupported PNM header");
    in.get();  // single whitespace before payload
    std::vector<char> bytes(static_cast<std::size_t>(h) * w * channels);
    in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
        throw PipelineError(path + ": truncated pixel payload");
    std::vector<Real> px(bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i)
        px[i] = static_cast<Real>(static_cast<unsigned char>(bytes[i])) / Real(255);
    return Tensor({h, w, channels}, std::move(px));
}

}  // namespace

void write_pgm(const std::string& path, const Tensor& map) { write_pnm(path, map, 1, "P5"); }
Tensor read_pgm(const std::string& path) { return read_pnm(path, 1, "P5"); }
void write_ppm(const std::string& path, const Tensor& rgb) { write_pnm(path, rgb, 3, "P6"); }
Tensor read_ppm(const std::string& path) { return read_pnm(path, 3, "P6"); }

Tensor resize_bilinear(const Tensor& x, int oh, int ow) {
    check(x.rank() == 3, "resize input must be (h,w,c)");
    check(oh >= 1 && ow >= 1, "resize target must be positive");
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    std::vector<Real> out(static_cast<std::size_t>(oh) * ow * c);
    auto v = x.values();
    const double sy = static_cast<double>(h) / oh, sx = static_cast<double>(w) / ow;
    for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
            const double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0, h - 1.0);
            const double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0, w - 1.0);
            const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
            const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
            const double wy = fy - y0, wx = fx - x0;
            for (int ch = 0; ch < c; ++ch) {
                const double v00 = v[(static_cast<std::size_t>(y0) * w + x0) * c + ch];
                const double v01 = v[(static_cast<std::size_t>(y0) * w + x1) * c + ch];
                const double v10 = v[(static_cast<std::size_t>(y1) * w + x0) * c + ch];
                const double v11 = v[(static_cast<std::size_t>(y1) * w + x1) * c + ch];
                out[(static_cast<std::size_t>(oy) * ow + ox) * c + ch] = static_cast<Real>(
                    (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11));
            }
        }
    return Tensor({oh, ow, c}, std::move(out));
}

Tensor resize_nearest(const Tensor& x, int oh, int ow) {
    check(x.rank() == 3, "resize input must be (h,w,c)");
    check(oh >= 1 && ow >= 1, "resize target must be positive");
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    std::vector<Real> out(static_cast<std::size_t>(oh) * ow * c);
    auto v = x.values();
    const double sy = static_cast<double>(h) / oh, sx = static_cast<double>(w) / ow;
    for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
            const int iy = std::min(static_cast<int>((oy + 0.5) * sy), h - 1);
            const int ix = std::min(static_cast<int>((ox + 0.5) * sx), w - 1);
            for (int ch = 0; ch < c; ++ch)
                out[(static_cast<std::size_t>(oy) * ow + ox) * c + ch] =
                    v[(static_cast<std::size_t>(iy) * w + ix) * c + ch];
        }
    return Tensor({oh, ow, c}, std::move(out));
}

Tensor rotate_bilinear(const Tensor& x, double deg) {
    check(x.rank() == 3, "rotate input must be (h,w,c)");
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    const double rad = rad_from_deg(deg);
    const double cs = std::cos(rad), sn = std::sin(rad);
    const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
    std::vector<Real> out(x.size(), Real(0));
    auto v = x.values();
    for (int oy = 0; oy < h; ++oy)
        for (int ox = 0; ox < w; ++ox) {
            // inverse map: rotate the output pixel back into the source frame
            const double dy = oy - cy, dx = ox - cx;
            const double fy = cy + cs * dy + sn * dx;
            const double fx = cx - sn * dy + cs * dx;
            if (fy < 0 || fy > h - 1 || fx < 0 || fx > w - 1) continue;
            const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
            const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
            const double wy = fy - y0, wx = fx - x0;
            for (int ch = 0; ch < c; ++ch) {
                const double v00 = v[(static_cast<std::size_t>(y0) * w + x0) * c + ch];
                const double v01 = v[(static_cast<std::size_t>(y0) * w + x1) * c + ch];
                const double v10 = v[(static_cast<std::size_t>(y1) * w + x0) * c + ch];
                const double v11 = v[(static_cast<std::size_t>(y1) * w + x1) * c + ch];
                out[(static_cast<std::size_t>(oy) * w + ox) * c + ch] = static_cast<Real>(
                    (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11));
            }
        }
    return Tensor(x.dims(), std::move(out));
}

Tensor hflip(const Tensor& x) {
    check(x.rank() == 3, "hflip input must be (h,w,c)");
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    std::vector<Real> out(x.size());
    auto v = x.values();
    for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
            for (int ch = 0; ch < c; ++ch)
                out[(static_cast<std::size_t>(y) * w + xx) * c + ch] =
                    v[(static_cast<std::size_t>(y) * w + (w - 1 - xx)) * c + ch];
    return Tensor(x.dims(), std::move(out));
}

void atomic_write_file(const std::string& path, const std::string& bytes) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw PipelineError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw PipelineError("short write to " + tmp.string());
    }
    fs::rename(tmp, target);
}

}  // namespace spine3d
