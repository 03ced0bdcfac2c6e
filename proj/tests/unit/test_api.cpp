#include "saami/api.hpp"
#include "saami/cli.hpp"
#include "saami/netsim.hpp"

#include <gtest/gtest.h>

#include <sstream>
#include <thread>

using namespace saami;
using namespace saami::api;
using namespace std::chrono_literals;
using nlohmann::json;

namespace {

const Ipv4Address kTarget(198, 51, 100, 1);

netsim::SimTopology topology()
{
    netsim::SimTopology t;
    t.control_link_delay = netsim::DelayModel::constant(1ms);
    t.pktout_delay = netsim::DelayModel::constant(2ms);
    t.pktin_delay = netsim::DelayModel::constant(500us);
    t.targets[kTarget] = netsim::TargetSpec{20ms, 0.0, {}, true};
    t.targets[Ipv4Address(198, 51, 100, 2)] = netsim::TargetSpec{20ms, 1.0, {}, true};
    t.targets[Ipv4Address(203, 0, 113, 9)] =
        netsim::TargetSpec{30ms, 0.0, {{Ipv4Address(10, 1, 0, 1), 1ms}, {Ipv4Address(10, 1, 0, 2), 2ms}}, true};
    return t;
}

struct Rig {
    netsim::VirtualTestbed tb;
    probe::ProbeEngine engine;
    PolicyEnforcer policy;
    MeasurementApi api;

    explicit Rig(PolicyConfig pc = {}, netsim::SimTopology topo = topology(), bool attach = true)
        : tb(std::move(topo)), engine({}, tb.clock()), policy(std::move(pc), tb.clock()), api(engine, policy)
    {
        if (attach) {
            tb.connect();
            engine.attach(tb.session());
            tb.loop().run_until_idle();
        }
    }

    Response call(const std::string& method, const std::string& path, const std::string& body = "",
                  const std::optional<std::string>& auth = std::nullopt)
    {
        return api.handle(method, path, body, auth);
    }
};

json body_of(const Response& r) { return json::parse(r.body); }

} // namespace

TEST(Api, PingRoundTripThroughDump)
{
    Rig rig;
    auto r = rig.call("PUT", "/ping/", R"({"tgt":"198.51.100.1","num":2,"payload":""})");
    ASSERT_EQ(r.status, 200) << r.body;
    EXPECT_EQ(body_of(r), json::parse(R"({"icmp_id":0})"));

    r = rig.call("PUT", "/ping/", R"({"tgt":"198.51.100.2","num":2,"payload":"x"})");
    ASSERT_EQ(r.status, 200);
    rig.tb.loop().run_for(5s);

    const auto dump = body_of(rig.call("GET", "/ping/dump"));
    ASSERT_EQ(dump.size(), 2u);
    const auto& answered = dump["0"];
    EXPECT_EQ(answered["target"], "198.51.100.1");
    EXPECT_EQ(answered["rtt_cs_us"], 2000);
    ASSERT_EQ(answered["probes"].size(), 2u);
    for (const auto& p : answered["probes"]) {
        ASSERT_EQ(p.size(), 3u);
        EXPECT_TRUE(p[0].is_number_integer());
        EXPECT_TRUE(p[1].is_number_integer());
        EXPECT_EQ(p[2], "198.51.100.1");
    }
    for (const auto& p : dump["1"]["probes"]) {
        EXPECT_TRUE(p[1].is_null());
        EXPECT_TRUE(p[2].is_null());
    }
}

TEST(Api, DumpsAreSnapshotsAndClearEmptiesThem)
{
    Rig rig;
    EXPECT_EQ(rig.call("GET", "/ping/dump").body, "{}");
    EXPECT_EQ(rig.call("POST", "/ping/clear").status, 200);
    rig.call("PUT", "/ping", R"({"tgt":"198.51.100.1","num":3})");
    rig.tb.loop().run_for(1s);
    const auto a = rig.call("GET", "/ping/dump");
    const auto b = rig.call("GET", "/ping/dump");
    EXPECT_EQ(a.body, b.body);
    const auto cleared = rig.call("POST", "/ping/clear");
    EXPECT_EQ(cleared.body, a.body);
    EXPECT_EQ(rig.call("GET", "/ping/dump").body, "{}");
    EXPECT_EQ(body_of(rig.call("GET", "/status"))["ids_in_use"], 0);
}

TEST(Api, MalformedRequestsAre400AndStartNothing)
{
    Rig rig;
    for (const char* body : {R"({"tgt":"not-an-ip","num":1})", R"({"num":1})", R"({"tgt":"198.51.100.1"})",
                             R"({"tgt":"198.51.100.1","num":0})", R"({"tgt":"198.51.100.1","num":1001})",
                             R"({"tgt":"198.51.100.1","num":1,"payload":5})",
                             R"({"tgt":"198.51.100.1","num":1,"out_port":-1})", "[1,2]", "{", ""}) {
        EXPECT_EQ(rig.call("PUT", "/ping/", body).status, 400) << body;
    }
    EXPECT_EQ(rig.call("PUT", "/traceroute/", R"({"tgt":"198.51.100.1","probes_per_ttl":0})").status, 400);
    EXPECT_EQ(rig.call("PUT", "/traceroute/", R"({"tgt":"198.51.100.1","probes_per_ttl":17})").status, 400);
    EXPECT_EQ(rig.engine.ids_in_use(), 0u);
    EXPECT_TRUE(rig.tb.sim().pktout_log().empty());
}

TEST(Api, UnknownRoutesAndMethods)
{
    Rig rig;
    EXPECT_EQ(rig.call("GET", "/nope").status, 404);
    EXPECT_EQ(rig.call("DELETE", "/ping/").status, 405);
    EXPECT_EQ(rig.call("PUT", "/ping/dump").status, 405);
    EXPECT_EQ(rig.call("GET", "/ping/dump?pretty=1").status, 200);
}

TEST(Api, TracerouteDumpReconstructsPath)
{
    Rig rig;
    ASSERT_EQ(rig.call("PUT", "/traceroute/", R"({"tgt":"203.0.113.9","probes_per_ttl":1})").status, 200);
    ASSERT_EQ(rig.call("PUT", "/traceroute/", R"({"tgt":"203.0.113.77","probes_per_ttl":1})").status, 200);
    rig.tb.loop().run_for(5s);
    const auto dump = body_of(rig.call("GET", "/traceroute/dump"));
    const auto& reached = dump["0"];
    EXPECT_EQ(reached["terminated"], "destination_reached");
    ASSERT_EQ(reached["hops"].size(), 3u);
    EXPECT_EQ(reached["hops"][0][0][0], "10.1.0.1");
    EXPECT_EQ(reached["hops"][1][0][0], "10.1.0.2");
    EXPECT_EQ(reached["hops"][2][0][0], "203.0.113.9");
    const auto& silent = dump["1"];
    EXPECT_EQ(silent["terminated"], "max_ttl");
    EXPECT_EQ(silent["hops"].size(), 30u);
    for (const auto& row : silent["hops"])
        EXPECT_TRUE(row[0][0].is_null());
}

TEST(Api, PolicyForbidsDisallowedKinds)
{
    PolicyConfig pc;
    pc.allowed_tasks = {TaskKind::Ping};
    Rig rig(pc);
    EXPECT_EQ(rig.call("PUT", "/traceroute/", R"({"tgt":"198.51.100.1","probes_per_ttl":1})").status, 403);
    EXPECT_EQ(rig.call("PUT", "/routerid/query", R"({"tgt":"198.51.100.1"})").status, 403);
    EXPECT_EQ(rig.call("PUT", "/routerid/config", R"({"serving":true})").status, 403);
    EXPECT_EQ(rig.call("PUT", "/ping/", R"({"tgt":"198.51.100.1","num":1})").status, 200);
    EXPECT_EQ(rig.engine.ids_in_use(), 1u);
}

TEST(Api, BearerTokenRequiredWhenConfigured)
{
    PolicyConfig pc;
    pc.auth_token = "s3cret";
    Rig rig(pc);
    const std::string req = R"({"tgt":"198.51.100.1","num":1})";
    EXPECT_EQ(rig.call("PUT", "/ping/", req).status, 403);
    EXPECT_EQ(rig.call("PUT", "/ping/", req, "Bearer wrong").status, 403);
    EXPECT_EQ(rig.call("PUT", "/ping/", req, "s3cret").status, 403);
    EXPECT_EQ(rig.call("GET", "/ping/dump", "", std::nullopt).status, 403);
    EXPECT_EQ(rig.call("PUT", "/ping/", req, "Bearer s3cret").status, 200);
}

TEST(Api, RateLimitRefusesAndRefundsFailures)
{
    PolicyConfig pc;
    pc.max_probe_rate = 10;
    Rig rig(pc);
    EXPECT_EQ(rig.call("PUT", "/ping/", R"({"tgt":"198.51.100.1","num":100})").status, 429);
    EXPECT_EQ(rig.call("PUT", "/ping/", R"({"tgt":"198.51.100.1","num":8})").status, 200);
    EXPECT_EQ(rig.call("PUT", "/ping/", R"({"tgt":"198.51.100.1","num":8})").status, 429);
    rig.tb.loop().run_for(1s);
    EXPECT_EQ(rig.call("PUT", "/ping/", R"({"tgt":"198.51.100.1","num":10})").status, 200);

    Rig detached(pc, topology(), false);
    EXPECT_EQ(detached.call("PUT", "/ping/", R"({"tgt":"198.51.100.1","num":10})").status, 503);
    EXPECT_EQ(detached.call("PUT", "/ping/", R"({"tgt":"198.51.100.1","num":10})").status, 503);
}

TEST(Api, AdmittedProbesStayWithinBucketOverTenSeconds)
{
    PolicyConfig pc;
    pc.max_probe_rate = 50;
    pc.bucket_depth = 20;
    Rig rig(pc);
    std::uint64_t admitted = 0;
    for (int step = 0; step < 1000; ++step) {
        if (rig.call("PUT", "/ping/", R"({"tgt":"198.51.100.1","num":3})").status == 200)
            admitted += 3;
        rig.tb.loop().run_for(10ms);
    }
    const double seconds = static_cast<double>(to_us(rig.tb.loop().now())) / 1e6;
    EXPECT_LE(static_cast<double>(admitted), 50 * seconds + 20);
    EXPECT_GT(admitted, 0u);
}

TEST(Api, EchoTimeoutIs504AndLeavesNoTask)
{
    auto topo = topology();
    topo.echo_delay = netsim::DelayModel::constant(3s);
    Rig rig({}, topo);
    const auto r = rig.call("PUT", "/ping/", R"({"tgt":"198.51.100.1","num":1})");
    EXPECT_EQ(r.status, 504);
    EXPECT_EQ(rig.engine.ids_in_use(), 0u);
    EXPECT_EQ(rig.call("GET", "/ping/dump").body, "{}");
}

TEST(Api, StateFullCarriesHintAndClearLiftsIt)
{
    Rig rig;
    for (std::size_t i = 0; i < probe::IdAllocator::kCapacity; ++i)
        ASSERT_EQ(rig.call("PUT", "/ping/", R"({"tgt":"198.51.100.1","num":1})").status, 200) << i;
    const auto full = rig.call("PUT", "/ping/", R"({"tgt":"198.51.100.1","num":1})");
    EXPECT_EQ(full.status, 503);
    EXPECT_TRUE(body_of(full).contains("hint"));
    rig.call("POST", "/ping/clear");
    EXPECT_EQ(rig.call("PUT", "/ping/", R"({"tgt":"198.51.100.1","num":1})").status, 200);
}

TEST(Api, RouterIdConfigRoundTrip)
{
    Rig rig;
    auto cfg = body_of(rig.call("GET", "/routerid/config"));
    EXPECT_TRUE(cfg["asn"].is_null());
    EXPECT_EQ(cfg["serving"], false);

    auto r = rig.call("PUT", "/routerid/config", R"({"asn":65001,"ident":"edge","serving":true})");
    ASSERT_EQ(r.status, 200) << r.body;
    cfg = body_of(r);
    EXPECT_EQ(cfg["asn"], 65001);
    EXPECT_EQ(cfg["ident"], "edge");
    EXPECT_EQ(cfg["serving"], true);
    EXPECT_EQ(body_of(rig.call("GET", "/routerid/config")), cfg);

    EXPECT_EQ(rig.call("PUT", "/routerid/config", R"({"asn":1})").status, 400);
    EXPECT_EQ(rig.call("PUT", "/routerid/config", R"({"asn":1,"ident":""})").status, 400);
    EXPECT_EQ(rig.call("PUT", "/routerid/config", R"({"serving":"yes"})").status, 400);

    cfg = body_of(rig.call("PUT", "/routerid/config", R"({"serving":false})"));
    EXPECT_EQ(cfg["serving"], false);
    EXPECT_EQ(cfg["asn"], 65001);
}

TEST(Api, RouterIdQueryDump)
{
    auto topo = topology();
    topo.router_id_hosts[Ipv4Address(10, 1, 0, 2)] = pktlab::RouterIdentity{64500, "core"};
    Rig rig({}, topo);
    ASSERT_EQ(rig.call("PUT", "/routerid/query", R"({"tgt":"10.1.0.2"})").status, 200);
    rig.tb.loop().run_for(1s);
    const auto dump = body_of(rig.call("GET", "/routerid/dump"));
    EXPECT_EQ(dump["0"]["asn"], 64500);
    EXPECT_EQ(dump["0"]["ident"], "core");
    EXPECT_EQ(dump["0"]["responder"], "10.1.0.2");
}

TEST(Api, StatusReportsSession)
{
    Rig rig;
    const auto s = body_of(rig.call("GET", "/status"));
    EXPECT_EQ(s["session"], "active");
    EXPECT_EQ(s["datapath_id"], 1);
    EXPECT_TRUE(s["rtt_cs_us"].is_null());
    Rig detached({}, topology(), false);
    EXPECT_EQ(body_of(detached.call("GET", "/status"))["session"], "none");
}

TEST(Policy, TokenBucketRefillsAndCaps)
{
    VirtualClock clock;
    TokenBucket b(100, 50, clock);
    EXPECT_DOUBLE_EQ(b.available(), 50);
    EXPECT_TRUE(b.try_take(50));
    EXPECT_FALSE(b.try_take(1));
    clock.advance_to(at_us(100000));
    EXPECT_NEAR(b.available(), 10, 1e-9);
    b.refund(1000);
    EXPECT_DOUBLE_EQ(b.available(), 50);
    clock.advance_to(at_us(10000000));
    EXPECT_DOUBLE_EQ(b.available(), 50);
}

TEST(Policy, ValidationAndKindNames)
{
    VirtualClock clock;
    PolicyConfig bad;
    bad.max_probe_rate = 0;
    EXPECT_THROW(PolicyEnforcer(bad, clock), ConfigError);
    for (auto k : {TaskKind::Ping, TaskKind::Traceroute, TaskKind::RouterIdQuery, TaskKind::RouterIdServe})
        EXPECT_EQ(parse_task_kind(task_kind_name(k)), k);
    EXPECT_FALSE(parse_task_kind("udp"));
}

TEST(ControllerConfig, ParsesAllKeys)
{
    std::istringstream in(R"(# controller
openflow_port = 6653
api_address = 127.0.0.1
api_port = 9090
probe_src_ip = 192.0.2.10
probe_src_mac = 02:00:00:00:00:0a
next_hop_ip = 192.0.2.1
next_hop_mac = 02:00:00:00:00:fe
default_out_port = 3
ewma_alpha = 0.25
probe_timeout_ms = 1500
max_probe_rate = 200
bucket_depth = 400
allowed_tasks = ping, traceroute
auth_token = tok
router_id_asn = 65001
router_id_ident = measurement switch
)");
    const auto c = load_controller_config(in);
    EXPECT_EQ(c.openflow_port, 6653);
    EXPECT_EQ(c.api_address, "127.0.0.1");
    EXPECT_EQ(c.api_port, 9090);
    EXPECT_EQ(c.engine.probe_src_ip, Ipv4Address(192, 0, 2, 10));
    EXPECT_EQ(c.engine.probe_src_mac.to_string(), "02:00:00:00:00:0a");
    EXPECT_EQ(c.next_hop_ip, Ipv4Address(192, 0, 2, 1));
    EXPECT_EQ(c.engine.default_out_port, 3u);
    EXPECT_DOUBLE_EQ(c.engine.ewma_alpha, 0.25);
    EXPECT_EQ(c.engine.probe_timeout, 1500ms);
    EXPECT_DOUBLE_EQ(c.policy.depth(), 400);
    EXPECT_EQ(c.policy.allowed_tasks, (std::set<TaskKind>{TaskKind::Ping, TaskKind::Traceroute}));
    EXPECT_EQ(c.policy.auth_token, "tok");
    EXPECT_EQ(c.router_identity, (pktlab::RouterIdentity{65001, "measurement switch"}));
}

TEST(ControllerConfig, RejectsBadLines)
{
    for (const char* text : {"api_port = 70000\n", "bogus = 1\n", "no equals sign\n", "ewma_alpha = 0\n",
                             "probe_src_ip = 1.2.3\n", "allowed_tasks = ping, udp\n", "router_id_asn = 5\n",
                             "max_probe_rate = -1\n"}) {
        std::istringstream in(text);
        EXPECT_THROW(load_controller_config(in), ConfigError) << text;
    }
}

TEST(Controller, ServesHttpWithRealtimeSwitch)
{
    ControllerConfig cfg;
    cfg.openflow_address = "127.0.0.1";
    cfg.openflow_port = 0;
    cfg.api_address = "127.0.0.1";
    cfg.api_port = 0;
    Controller controller(cfg);
    controller.start();
    auto topo = topology();
    auto sw = netsim::run_sim_switch(topo, "127.0.0.1", controller.openflow_port());
    ASSERT_TRUE(controller.wait_for_switch(5s));

    cli::HttpApiClient client({"127.0.0.1", controller.api_port()}, std::nullopt);
    auto r = client.request("PUT", "/ping/", R"({"tgt":"198.51.100.1","num":2})");
    ASSERT_EQ(r.status, 200) << r.body;
    for (int i = 0; i < 100; ++i) {
        const auto d = json::parse(client.request("GET", "/ping/dump", "").body);
        if (!d["0"]["probes"][1][1].is_null())
            break;
        std::this_thread::sleep_for(20ms);
    }
    const auto d = json::parse(client.request("GET", "/ping/dump", "").body);
    EXPECT_EQ(d["0"]["probes"].size(), 2u);
    EXPECT_FALSE(d["0"]["probes"][0][1].is_null());
    EXPECT_EQ(client.request("GET", "/nope", "").status, 404);
    sw->stop();
    controller.stop();
}
