#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>

namespace saami {

using Duration = std::chrono::microseconds;

// Time on the controller's monotonic timeline, microsecond resolution.
// The epoch is controller (or simulation) start, never wall-clock time.
struct MonotonicEpoch {
    using duration = Duration;
    using rep = duration::rep;
    using period = duration::period;
    using time_point = std::chrono::time_point<MonotonicEpoch, duration>;
    static constexpr bool is_steady = true;
};

using TimePoint = MonotonicEpoch::time_point;

inline std::int64_t to_us(TimePoint t) { return t.time_since_epoch().count(); }
inline std::int64_t to_us(Duration d) { return d.count(); }
inline TimePoint at_us(std::int64_t us) { return TimePoint{Duration{us}}; }

class Clock {
public:
    virtual ~Clock() = default;
    virtual TimePoint now() const = 0;
};

class SteadyClock final : public Clock {
public:
    SteadyClock() : start_(std::chrono::steady_clock::now()) { }

    TimePoint now() const override
    {
        return TimePoint{std::chrono::duration_cast<Duration>(std::chrono::steady_clock::now() - start_)};
    }

    std::chrono::steady_clock::time_point to_steady(TimePoint t) const
    {
        return start_ + t.time_since_epoch();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

// Driven by a discrete-event loop. Never moves backwards.
class VirtualClock final : public Clock {
public:
    TimePoint now() const override { return TimePoint{Duration{now_us_.load()}}; }

    void advance_to(TimePoint t)
    {
        auto us = to_us(t);
        if (us > now_us_.load())
            now_us_.store(us);
    }

private:
    std::atomic<std::int64_t> now_us_{0};
};

} // namespace saami
