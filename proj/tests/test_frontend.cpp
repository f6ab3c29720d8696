#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "mole/frontend.hpp"
#include "testutil.hpp"

using namespace mole;
using testutil::close;

namespace {

std::vector<double> sine(double freq, double amplitude, double seconds, int rate = 16000) {
    std::vector<double> s(static_cast<std::size_t>(seconds * rate));
    for (std::size_t i = 0; i < s.size(); ++i) {
        s[i] = amplitude * std::sin(2.0 * M_PI * freq * static_cast<double>(i) / rate);
    }
    return s;
}

}  // namespace

TEST_CASE("logmel of one second of silence") {
    std::vector<double> silence(16000, 0.0);
    Tensor feats = logmel(silence, 16000);
    CHECK(feats.dim(0) == 98);  // 1 + floor((16000 - 400) / 160)
    CHECK(feats.dim(1) == 80);
    const double floor_log = std::log(1e-10);
    for (double v : feats.values()) CHECK(v == floor_log);
}

TEST_CASE("logmel 440 Hz tone peaks in the filter containing 440 Hz") {
    // Oracle: evaluate each triangular response at 440 Hz from the center
    // frequencies alone and take the argmax.
    LogMelOptions opts;
    const auto centers = mel_filter_centers(opts);
    int expect = 0;
    double best = -1.0;
    for (int m = 0; m < opts.mel_bins; ++m) {
        const double left = m > 0 ? centers[static_cast<std::size_t>(m - 1)] : opts.fmin;
        const double right =
            m + 1 < opts.mel_bins ? centers[static_cast<std::size_t>(m + 1)] : opts.fmax;
        const double center = centers[static_cast<std::size_t>(m)];
        double w = 0.0;
        if (440.0 > left && 440.0 < center) {
            w = (440.0 - left) / (center - left);
        } else if (440.0 >= center && 440.0 < right) {
            w = (right - 440.0) / (right - center);
        }
        if (w > best) {
            best = w;
            expect = m;
        }
    }

    Tensor feats = logmel(sine(440.0, 0.5, 0.2), 16000);
    for (int f = 0; f < feats.dim(0); ++f) {
        int arg = 0;
        for (int m = 1; m < feats.dim(1); ++m) {
            if (feats(f, m) > feats(f, arg)) arg = m;
        }
        CHECK(arg == expect);
    }
}

TEST_CASE("doubling amplitude shifts log energies by 2 ln 2") {
    Tensor a = logmel(sine(440.0, 0.2, 0.1), 16000);
    Tensor b = logmel(sine(440.0, 0.4, 0.1), 16000);
    const double floor_log = std::log(1e-10);
    int checked = 0;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        if (a.values()[i] > floor_log + 1.0 && b.values()[i] > floor_log + 1.0) {
            CHECK(close(b.values()[i] - a.values()[i], 2.0 * std::log(2.0), 1e-9));
            ++checked;
        }
    }
    CHECK(checked > 100);
}

TEST_CASE("logmel input contract errors") {
    std::vector<double> short_signal(399, 0.0);
    CHECK_THROWS_AS(logmel(short_signal, 16000), ContractError);
    std::vector<double> ok(16000, 0.0);
    CHECK_THROWS_AS(logmel(ok, 8000), ContractError);
}

TEST_CASE("wav reader round trip") {
    auto path = std::filesystem::temp_directory_path() / "mole_test.wav";
    std::vector<std::int16_t> pcm;
    for (int i = 0; i < 800; ++i) {
        pcm.push_back(static_cast<std::int16_t>(12000 * std::sin(2.0 * M_PI * 440.0 * i / 16000)));
    }
    {
        std::ofstream out(path, std::ios::binary);
        auto w32 = [&](std::uint32_t v) { out.write(reinterpret_cast<char*>(&v), 4); };
        auto w16 = [&](std::uint16_t v) { out.write(reinterpret_cast<char*>(&v), 2); };
        const std::uint32_t data_bytes = static_cast<std::uint32_t>(pcm.size() * 2);
        out.write("RIFF", 4);
        w32(36 + data_bytes);
        out.write("WAVE", 4);
        out.write("fmt ", 4);
        w32(16);
        w16(1);      // PCM
        w16(1);      // mono
        w32(16000);  // rate
        w32(16000 * 2);
        w16(2);
        w16(16);
        out.write("data", 4);
        w32(data_bytes);
        out.write(reinterpret_cast<const char*>(pcm.data()), data_bytes);
    }
    WavData wav = read_wav_pcm16_mono(path.string());
    CHECK(wav.sample_rate == 16000);
    REQUIRE(wav.samples.size() == pcm.size());
    for (std::size_t i = 0; i < pcm.size(); ++i) {
        CHECK(close(wav.samples[i], pcm[i] / 32768.0, 1e-12));
    }
    std::filesystem::remove(path);
}

TEST_CASE("wav reader rejects stereo") {
    auto path = std::filesystem::temp_directory_path() / "mole_test_stereo.wav";
    {
        std::ofstream out(path, std::ios::binary);
        auto w32 = [&](std::uint32_t v) { out.write(reinterpret_cast<char*>(&v), 4); };
        auto w16 = [&](std::uint16_t v) { out.write(reinterpret_cast<char*>(&v), 2); };
        out.write("RIFF", 4);
        w32(36);
        out.write("WAVE", 4);
        out.write("fmt ", 4);
        w32(16);
        w16(1);
        w16(2);  // stereo
        w32(16000);
        w32(16000 * 4);
        w16(4);
        w16(16);
        out.write("data", 4);
        w32(0);
    }
    CHECK_THROWS_AS(read_wav_pcm16_mono(path.string()), ContractError);
    std::filesystem::remove(path);
}
