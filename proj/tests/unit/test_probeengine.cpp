#include "saami/netsim.hpp"
#include "saami/probeengine.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

using namespace saami;
using namespace saami::probe;
using namespace std::chrono_literals;

namespace {

const Ipv4Address kTarget(198, 51, 100, 1);
const Ipv4Address kDest(203, 0, 113, 50);

netsim::SimTopology constant_topology()
{
    netsim::SimTopology t;
    t.control_link_delay = netsim::DelayModel::constant(5ms);
    t.pktout_delay = netsim::DelayModel::constant(2ms);
    t.pktin_delay = netsim::DelayModel::constant(500us);
    t.echo_delay = netsim::DelayModel::constant(0us);
    t.targets[kTarget] = netsim::TargetSpec{30ms, 0.0, {}, true};
    t.targets[kDest] = netsim::TargetSpec{
        60ms, 0.0, {{Ipv4Address(198, 18, 1, 1), 2ms}, {Ipv4Address(198, 18, 1, 2), 2ms}}, true};
    return t;
}

struct Rig {
    netsim::VirtualTestbed tb;
    ProbeEngine engine;

    explicit Rig(netsim::SimTopology topo, EngineConfig cfg = {})
        : tb(std::move(topo)), engine(std::move(cfg), tb.clock())
    {
        tb.connect();
        engine.attach(tb.session());
        tb.loop().run_until_idle();
    }
};

pktlab::ParsedReply echo_reply_for(std::uint16_t id, std::uint16_t seq, Ipv4Address from)
{
    pktlab::ParsedReply r;
    r.kind = pktlab::ReplyKind::EchoReply;
    r.responder = from;
    r.destination = Ipv4Address(192, 0, 2, 100);
    r.icmp_id = id;
    r.icmp_seq = seq;
    return r;
}

} // namespace

TEST(Ewma, WorkedExamples)
{
    RttEstimator e;
    EXPECT_EQ(e.value(), 0us);
    e = ewma_update(e, 10ms);
    e = ewma_update(e, 20ms);
    EXPECT_EQ(e.value(), 15ms);

    RttEstimator f;
    for (auto s : {8ms, 8ms, 8ms, 40ms})
        f = ewma_update(f, s);
    EXPECT_EQ(*f.current_us, 24000.0);
    EXPECT_EQ(f.sample_count, 4u);
}

TEST(Ewma, ContractionTowardsEachSample)
{
    std::mt19937_64 rng(10);
    for (double alpha : {0.1, 0.5, 0.9}) {
        RttEstimator e;
        e.alpha = alpha;
        e = ewma_update(e, 5ms);
        for (int i = 0; i < 2000; ++i) {
            const Duration s{static_cast<std::int64_t>(rng() % 100000)};
            const double before = *e.current_us;
            e = ewma_update(e, s);
            const double x = static_cast<double>(s.count());
            EXPECT_NEAR(std::abs(*e.current_us - x), (1 - alpha) * std::abs(before - x), 1e-6);
            EXPECT_GE(*e.current_us, 0.0);
        }
    }
}

TEST(Ewma, AlphaOneTracksLastSample)
{
    RttEstimator e;
    e.alpha = 1.0;
    for (auto s : {3ms, 90ms, 1ms, 0ms}) {
        e = ewma_update(e, s);
        EXPECT_EQ(e.value(), s);
    }
}

TEST(Ewma, RejectsBadInput)
{
    EXPECT_THROW(ewma_update({}, -1us), NegativeSample);
    RttEstimator e;
    e.alpha = 0.0;
    EXPECT_THROW(ewma_update(e, 1ms), std::invalid_argument);
    EngineConfig cfg;
    cfg.ewma_alpha = 1.5;
    VirtualClock clock;
    EXPECT_THROW(ProbeEngine(cfg, clock), std::invalid_argument);
}

TEST(EstimateRtt, SubtractsAndClamps)
{
    ProbeRecord r;
    r.t_out = at_us(1000);
    EXPECT_FALSE(estimate_rtt(r, 0us));
    r.t_in = at_us(51000);
    EXPECT_EQ(estimate_rtt(r, 10ms), 40ms);
    EXPECT_EQ(estimate_rtt(r, 50ms), 0us);
    EXPECT_EQ(estimate_rtt(r, 80ms), 0us);
}

TEST(Traceroute, SeqEncodingIsBijective)
{
    for (std::uint32_t k = 1; k <= 16; ++k) {
        TracerouteTask t;
        t.probes_per_ttl = k;
        std::set<std::uint16_t> seen;
        for (int ttl = 1; ttl <= kMaxTtl; ++ttl) {
            for (std::uint32_t i = 0; i < k; ++i) {
                const auto seq = t.seq_for(ttl, i);
                EXPECT_TRUE(seen.insert(seq).second);
                EXPECT_EQ(t.ttl_index(seq), std::make_pair(ttl, i));
            }
        }
    }
}

TEST(IdAllocator, WrapsFillsAndReleases)
{
    IdAllocator ids;
    EXPECT_EQ(ids.allocate(), 0);
    EXPECT_EQ(ids.allocate(), 1);
    ids.release(0);
    EXPECT_EQ(ids.allocate(), 2);
    for (std::size_t i = 3; i < IdAllocator::kCapacity; ++i)
        ids.allocate();
    EXPECT_EQ(ids.allocate(), 0);
    EXPECT_EQ(ids.size(), IdAllocator::kCapacity);
    EXPECT_THROW(ids.allocate(), StateFull);
    ids.release(4242);
    EXPECT_FALSE(ids.in_use(4242));
    EXPECT_EQ(ids.allocate(), 4242);
    ids.clear();
    EXPECT_EQ(ids.size(), 0u);
    EXPECT_FALSE(ids.in_use(4242));
}

TEST(Engine, RefusesWorkWithoutSession)
{
    VirtualClock clock;
    ProbeEngine engine({}, clock);
    EXPECT_THROW(engine.start_ping(kTarget, 1, ""), NoSession);
    EXPECT_THROW(engine.start_traceroute(kTarget, 1), NoSession);
    EXPECT_THROW(engine.refresh_rtt_cs(), NoSession);
    EXPECT_EQ(engine.ids_in_use(), 0u);
}

TEST(Engine, PingUnderConstantDelays)
{
    Rig rig(constant_topology());
    const auto id = rig.engine.start_ping(kTarget, 5, "hello");
    EXPECT_FALSE(rig.engine.ping_complete(id));
    rig.tb.loop().run_until_idle();
    EXPECT_TRUE(rig.engine.ping_complete(id));

    const auto dump = rig.engine.dump_pings();
    ASSERT_EQ(dump.tasks.size(), 1u);
    const auto& task = dump.tasks[0];
    EXPECT_EQ(task.icmp_id, id);
    EXPECT_EQ(task.rtt_cs_at_start, 10ms);
    EXPECT_EQ(task.payload, "hello");
    ASSERT_EQ(task.records.size(), 5u);
    for (const auto& r : task.records) {
        ASSERT_TRUE(r.t_in);
        EXPECT_EQ(r.responder, kTarget);
        EXPECT_GE(*r.t_in, r.t_out);
        EXPECT_EQ(*estimate_rtt(r, task.rtt_cs_at_start),
                  std::max(0us, (*r.t_in - r.t_out) - task.rtt_cs_at_start));
        const auto est = *estimate_rtt(r, task.rtt_cs_at_start);
        EXPECT_LE(est, 30ms + 2500us);
        EXPECT_GE(est, 30ms + 2500us - 10us);
    }
    EXPECT_EQ(task.records[0].t_in.value() - task.records[0].t_out, 42500us);
    EXPECT_EQ(rig.engine.counters().replies, 5u);
    EXPECT_EQ(rig.engine.estimator().sample_count, 1u);
}

TEST(Engine, ProbesLeaveInWriteOrder)
{
    auto topo = constant_topology();
    topo.control_link_delay = netsim::DelayModel::uniform(1ms, 9ms);
    topo.pktout_delay = netsim::DelayModel::default_pktout();
    Rig rig(topo);
    rig.engine.start_ping(kTarget, 40, "");
    rig.tb.loop().run_until_idle();
    const auto& log = rig.tb.sim().pktout_log();
    std::vector<std::uint16_t> seqs;
    for (const auto& p : log) {
        const auto f = pktlab::extract_fields(p.frame);
        if (f && f->icmp_type == pktlab::kIcmpEchoRequest)
            seqs.push_back(be::get16(p.frame.data() + 40));
    }
    ASSERT_EQ(seqs.size(), 40u);
    for (std::uint16_t i = 0; i < 40; ++i)
        EXPECT_EQ(seqs[i], i);
}

TEST(Engine, DuplicateUnknownAndLateReplies)
{
    auto topo = constant_topology();
    const Ipv4Address slow(198, 51, 100, 2);
    topo.targets[slow] = netsim::TargetSpec{4s, 0.0, {}, true};
    Rig rig(topo);
    const auto id = rig.engine.start_ping(kTarget, 1, "");
    rig.tb.loop().run_until_idle();
    const auto first = rig.engine.dump_pings().tasks[0].records[0].t_in;

    rig.engine.handle_reply(echo_reply_for(id, 0, kTarget), rig.tb.loop().now());
    EXPECT_EQ(rig.engine.counters().duplicates, 1u);
    EXPECT_EQ(rig.engine.dump_pings().tasks[0].records[0].t_in, first);

    rig.engine.handle_reply(echo_reply_for(static_cast<std::uint16_t>(id + 100), 0, kTarget), rig.tb.loop().now());
    rig.engine.handle_reply(echo_reply_for(id, 7, kTarget), rig.tb.loop().now());
    EXPECT_EQ(rig.engine.counters().unknown, 2u);

    const auto slow_id = rig.engine.start_ping(slow, 1, "");
    rig.tb.loop().run_until_idle();
    EXPECT_EQ(rig.engine.counters().late, 1u);
    EXPECT_TRUE(rig.engine.ping_complete(slow_id));
    const auto dump = rig.engine.dump_pings();
    EXPECT_FALSE(dump.tasks[1].records[0].t_in);
    EXPECT_FALSE(dump.tasks[1].records[0].responder);
}

TEST(Engine, EchoTimeoutRollsBackTheTask)
{
    auto topo = constant_topology();
    topo.echo_delay = netsim::DelayModel::constant(3s);
    netsim::VirtualTestbed tb(topo);
    tb.connect();
    ProbeEngine engine({}, tb.clock());
    engine.attach(tb.session());
    EXPECT_THROW(engine.start_ping(kTarget, 3, ""), session::EchoTimeout);
    EXPECT_EQ(engine.ids_in_use(), 0u);
    EXPECT_TRUE(engine.dump_pings().tasks.empty());
}

TEST(Engine, RejectsInvalidTasks)
{
    Rig rig(constant_topology());
    EXPECT_THROW(rig.engine.start_ping(kTarget, 0, ""), InvalidTask);
    EXPECT_THROW(rig.engine.start_ping(kTarget, 1001, ""), InvalidTask);
    EXPECT_THROW(rig.engine.start_ping(kTarget, 1, std::string(1473, 'x')), InvalidTask);
    EXPECT_THROW(rig.engine.start_traceroute(kTarget, 0), InvalidTask);
    EXPECT_THROW(rig.engine.start_traceroute(kTarget, 17), InvalidTask);
    EXPECT_EQ(rig.engine.ids_in_use(), 0u);
}

TEST(Engine, ClearFreesIdsAndReturnsWhatWasRemoved)
{
    Rig rig(constant_topology());
    std::set<std::uint16_t> ids;
    for (int i = 0; i < 4; ++i)
        EXPECT_TRUE(ids.insert(rig.engine.start_ping(kTarget, 1, "")).second);
    rig.tb.loop().run_until_idle();
    EXPECT_EQ(rig.engine.ids_in_use(), 4u);
    const auto before = rig.engine.dump_pings();
    const auto again = rig.engine.dump_pings();
    EXPECT_EQ(before.tasks.size(), again.tasks.size());
    const auto cleared = rig.engine.clear_pings();
    EXPECT_EQ(cleared.tasks.size(), 4u);
    EXPECT_EQ(rig.engine.ids_in_use(), 0u);
    EXPECT_TRUE(rig.engine.dump_pings().tasks.empty());
}

TEST(Engine, TracerouteReachesDestination)
{
    Rig rig(constant_topology());
    const auto id = rig.engine.start_traceroute(kDest, 2);
    rig.tb.loop().run_until_idle();
    EXPECT_TRUE(rig.engine.traceroute_complete(id));
    const auto dump = rig.engine.dump_traceroutes();
    ASSERT_EQ(dump.tasks.size(), 1u);
    const auto& t = dump.tasks[0];
    EXPECT_EQ(t.terminated(rig.tb.loop().now()), Termination::DestinationReached);
    EXPECT_EQ(t.destination_ttl(), 3);
    const auto hops = t.hops();
    ASSERT_EQ(hops.size(), 3u);
    EXPECT_EQ(hops.at(1)[0].responder, Ipv4Address(198, 18, 1, 1));
    EXPECT_EQ(hops.at(2)[1].responder, Ipv4Address(198, 18, 1, 2));
    EXPECT_EQ(hops.at(3)[0].responder, kDest);
    EXPECT_EQ(hops.at(1)[0].rtt, 4ms + 2500us);
    for (const auto& [ttl, row] : hops)
        EXPECT_EQ(row.size(), 2u);
}

TEST(Engine, TracerouteToSilentTargetRunsToMaxTtl)
{
    Rig rig(constant_topology());
    const auto id = rig.engine.start_traceroute(Ipv4Address(203, 0, 113, 99), 1);
    rig.tb.loop().run_until_idle();
    EXPECT_FALSE(rig.engine.traceroute_complete(id));
    rig.tb.loop().run_for(kProbeTimeout);
    EXPECT_TRUE(rig.engine.traceroute_complete(id));
    const auto t = rig.engine.dump_traceroutes().tasks.at(0);
    EXPECT_EQ(t.terminated(rig.tb.loop().now()), Termination::MaxTtl);
    EXPECT_EQ(t.hops().size(), static_cast<std::size_t>(kMaxTtl));
}

TEST(Engine, RouterIdQueryAndServing)
{
    auto topo = constant_topology();
    const pktlab::RouterIdentity remote{64512, "edge-7"};
    topo.router_id_hosts[Ipv4Address(198, 18, 1, 2)] = remote;
    Rig rig(topo);
    const auto id = rig.engine.start_router_id_query(Ipv4Address(198, 18, 1, 2));
    rig.tb.loop().run_until_idle();
    EXPECT_TRUE(rig.engine.router_id_complete(id));
    const auto dump = rig.engine.dump_router_ids();
    ASSERT_EQ(dump.tasks.size(), 1u);
    EXPECT_EQ(dump.tasks[0].identity, remote);
    EXPECT_EQ(dump.tasks[0].record.responder, Ipv4Address(198, 18, 1, 2));

    EXPECT_THROW(rig.engine.set_router_identity(pktlab::RouterIdentity{1, ""}), InvalidTask);
    rig.engine.set_router_identity(pktlab::RouterIdentity{65001, "me"});
    pktlab::RouterIdQuery q;
    q.src_mac = MacAddress({2, 0, 0, 0, 0, 9});
    q.dst_mac = MacAddress({2, 0, 0, 0, 0, 1});
    q.src_ip = Ipv4Address(198, 51, 100, 7);
    q.dst_ip = Ipv4Address(192, 0, 2, 100);
    q.icmp_id = 5;
    const auto before = rig.tb.sim().pktout_log().size();
    rig.tb.sim().inject(2, pktlab::build_router_id_query(q));
    rig.tb.loop().run_until_idle();
    EXPECT_EQ(rig.engine.counters().router_id_served, 1u);
    ASSERT_EQ(rig.tb.sim().pktout_log().size(), before + 1);
    const auto& out = rig.tb.sim().pktout_log().back();
    EXPECT_EQ(out.port, 2u);
    const auto reply = pktlab::parse_reply(out.frame);
    EXPECT_EQ(reply.identity, (pktlab::RouterIdentity{65001, "me"}));
    EXPECT_EQ(reply.destination, q.src_ip);

    rig.engine.set_serving(false);
    rig.tb.sim().inject(2, pktlab::build_router_id_query(q));
    rig.tb.loop().run_until_idle();
    EXPECT_EQ(rig.engine.counters().router_id_served, 1u);
    EXPECT_EQ(rig.tb.sim().pktout_log().size(), before + 1);
}

TEST(Engine, FiveProbeMeanNoWorseUnderDeterministicDelays)
{
    std::mt19937_64 rng(77);
    int no_worse = 0;
    const int trials = 100;
    for (int trial = 0; trial < trials; ++trial) {
        auto topo = constant_topology();
        const Duration truth{10000 + static_cast<std::int64_t>(rng() % 190000)};
        topo.targets[kTarget].base_rtt = truth;
        topo.seed = 1000 + static_cast<std::uint64_t>(trial);
        Rig single(topo);
        const auto a = single.engine.start_ping(kTarget, 1, "");
        single.tb.loop().run_until_idle();
        Rig multi(topo);
        const auto b = multi.engine.start_ping(kTarget, 5, "");
        multi.tb.loop().run_until_idle();

        const auto one = single.engine.dump_pings().tasks.at(0);
        ASSERT_EQ(one.icmp_id, a);
        const auto err1 = std::abs(static_cast<double>((*estimate_rtt(one.records[0], one.rtt_cs_at_start) - truth).count()));
        const auto five = multi.engine.dump_pings().tasks.at(0);
        ASSERT_EQ(five.icmp_id, b);
        double sum = 0;
        for (const auto& r : five.records)
            sum += static_cast<double>(estimate_rtt(r, five.rtt_cs_at_start)->count());
        const double err5 = std::abs(sum / 5.0 - static_cast<double>(truth.count()));
        no_worse += err5 <= err1;
    }
    EXPECT_GE(no_worse, trials * 9 / 10);
}
