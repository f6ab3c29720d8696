#include "mole/frontend.hpp"

#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>

namespace mole {

namespace {

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Iterative radix-2 FFT, in place.
void fft(std::vector<std::complex<double>>& a) {
    const std::size_t n = a.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double angle = -2.0 * M_PI / static_cast<double>(len);
        const std::complex<double> wlen(std::cos(angle), std::sin(angle));
        for (std::size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0);
            for (std::size_t j = 0; j < len / 2; ++j) {
                const auto u = a[i + j];
                const auto v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
}

// Edge points of the triangular filters in mel space: mel_bins + 2 points.
std::vector<double> mel_edges_hz(const LogMelOptions& opts) {
    const double lo = hz_to_mel(opts.fmin), hi = hz_to_mel(opts.fmax);
    std::vector<double> edges(static_cast<std::size_t>(opts.mel_bins + 2));
    for (int i = 0; i < opts.mel_bins + 2; ++i) {
        edges[static_cast<std::size_t>(i)] = mel_to_hz(lo + (hi - lo) * i / (opts.mel_bins + 1));
    }
    return edges;
}

}  // namespace

std::vector<double> mel_filter_centers(const LogMelOptions& opts) {
    const auto edges = mel_edges_hz(opts);
    std::vector<double> centers(static_cast<std::size_t>(opts.mel_bins));
    for (int m = 0; m < opts.mel_bins; ++m) centers[static_cast<std::size_t>(m)] = edges[m + 1];
    return centers;
}

Tensor logmel(const std::vector<double>& samples, int sample_rate, const LogMelOptions& opts) {
    if (sample_rate != opts.sample_rate) {
        throw ContractError("logmel: expected " + std::to_string(opts.sample_rate) +
                            " Hz input, got " + std::to_string(sample_rate) + " (no resampling)");
    }
    const auto n_samples = static_cast<long long>(samples.size());
    if (n_samples < opts.window) {
        throw ContractError("logmel: signal shorter than one window (" +
                            std::to_string(n_samples) + " < " + std::to_string(opts.window) + ")");
    }
    const int frames = 1 + static_cast<int>((n_samples - opts.window) / opts.hop);
    const int bins = opts.fft / 2 + 1;

    // Hann window (periodic).
    std::vector<double> window(static_cast<std::size_t>(opts.window));
    for (int i = 0; i < opts.window; ++i) {
        window[static_cast<std::size_t>(i)] = 0.5 * (1.0 - std::cos(2.0 * M_PI * i / opts.window));
    }

    // Triangular mel filterbank over power-spectrum bins.
    const auto edges = mel_edges_hz(opts);
    std::vector<std::vector<double>> filters(static_cast<std::size_t>(opts.mel_bins),
                                             std::vector<double>(static_cast<std::size_t>(bins), 0.0));
    for (int m = 0; m < opts.mel_bins; ++m) {
        const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
        for (int k = 0; k < bins; ++k) {
            const double freq = static_cast<double>(k) * opts.sample_rate / opts.fft;
            double w = 0.0;
            if (freq > left && freq < center) {
                w = (freq - left) / (center - left);
            } else if (freq >= center && freq < right) {
                w = (right - freq) / (right - center);
            }
            filters[static_cast<std::size_t>(m)][static_cast<std::size_t>(k)] = w;
        }
    }

    Tensor out(Shape{frames, opts.mel_bins});
    std::vector<std::complex<double>> buf(static_cast<std::size_t>(opts.fft));
    std::vector<double> power(static_cast<std::size_t>(bins));
    for (int f = 0; f < frames; ++f) {
        const std::size_t start = static_cast<std::size_t>(f) * opts.hop;
        for (int i = 0; i < opts.fft; ++i) {
            const double v = i < opts.window ? samples[start + static_cast<std::size_t>(i)] *
                                                   window[static_cast<std::size_t>(i)]
                                             : 0.0;
            buf[static_cast<std::size_t>(i)] = {v, 0.0};
        }
        fft(buf);
        for (int k = 0; k < bins; ++k) power[static_cast<std::size_t>(k)] = std::norm(buf[static_cast<std::size_t>(k)]);
        for (int m = 0; m < opts.mel_bins; ++m) {
            double energy = 0.0;
            const auto& filt = filters[static_cast<std::size_t>(m)];
            for (int k = 0; k < bins; ++k) energy += filt[static_cast<std::size_t>(k)] * power[static_cast<std::size_t>(k)];
            out(f, m) = std::log(std::max(energy, opts.floor_eps));
        }
    }
    return out;
}

WavData read_wav_pcm16_mono(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open wav file " + path);

    char tag[4];
    std::uint32_t size;
    in.read(tag, 4);
    if (!in || std::memcmp(tag, "RIFF", 4) != 0) throw IoError("not a RIFF file: " + path);
    in.read(reinterpret_cast<char*>(&size), 4);
    in.read(tag, 4);
    if (!in || std::memcmp(tag, "WAVE", 4) != 0) throw IoError("not a WAVE file: " + path);

    WavData wav;
    bool got_fmt = false;
    while (in.read(tag, 4)) {
        in.read(reinterpret_cast<char*>(&size), 4);
        if (!in) break;
        if (std::memcmp(tag, "fmt ", 4) == 0) {
            std::vector<char> chunk(size);
            in.read(chunk.data(), size);
            if (size < 16) throw IoError("wav: malformed fmt chunk");
            std::uint16_t format, channels, bits;
            std::uint32_t rate;
            std::memcpy(&format, chunk.data(), 2);
            std::memcpy(&channels, chunk.data() + 2, 2);
            std::memcpy(&rate, chunk.data() + 4, 4);
            std::memcpy(&bits, chunk.data() + 14, 2);
            if (format != 1 || bits != 16) throw ContractError("wav: PCM16 required");
            if (channels != 1) throw ContractError("wav: mono required");
            wav.sample_rate = static_cast<int>(rate);
            got_fmt = true;
        } else if (std::memcmp(tag, "data", 4) == 0) {
            if (!got_fmt) throw IoError("wav: data before fmt");
            std::vector<std::int16_t> pcm(size / 2);
            in.read(reinterpret_cast<char*>(pcm.data()), static_cast<std::streamsize>(pcm.size() * 2));
            if (!in) throw IoError("wav: truncated data chunk");
            wav.samples.reserve(pcm.size());
            for (std::int16_t s : pcm) wav.samples.push_back(s / 32768.0);
            return wav;
        } else {
            in.seekg(size + (size & 1), std::ios::cur);  // chunks are word-aligned
        }
    }
    throw IoError("wav: no data chunk in " + path);
}

}  // namespace mole
