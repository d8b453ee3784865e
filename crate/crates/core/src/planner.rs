//! Closed-form dimensioning: stability conditions, cluster traffic, the low-load
//! throughput bound and the network energy comparison.
//!
//! Power is carried in integer milliwatts so class totals are exact.

use std::fmt;

use crate::error::ScenarioError;
use crate::scenario_file::{parse_f64, parse_u64, KeyValues};

/// Violated necessary condition for stable queues.
#[derive(Debug, Clone, PartialEq)]
pub enum Constraint {
    /// Column sum of multipath `j` is not below `C`.
    Multipath { j: usize, demand: f64, limit: f64 },
    /// Row sum of source `i` is not below `t_i * C`.
    Source { i: usize, demand: f64, limit: f64 },
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constraint::Multipath { j, demand, limit } => {
                write!(
                    f,
                    "multipath {j}: demand {demand:.6e} b/s is not below {limit:.6e} b/s"
                )
            }
            Constraint::Source { i, demand, limit } => {
                write!(
                    f,
                    "source {i}: demand {demand:.6e} b/s is not below {limit:.6e} b/s"
                )
            }
        }
    }
}

/// Checks `sum_i a_ij < C` for every multipath and `sum_j a_ij < t_i C` for every
/// source. Returns every violated constraint; empty means the conditions hold.
pub fn stability_ok(a: &[Vec<f64>], channel_rate: f64, transmitters: &[u32]) -> Vec<Constraint> {
    let mut out = Vec::new();
    let m = a.first().map_or(0, Vec::len);
    for j in 0..m {
        let demand: f64 = a.iter().map(|row| row[j]).sum();
        if demand >= channel_rate {
            out.push(Constraint::Multipath {
                j,
                demand,
                limit: channel_rate,
            });
        }
    }
    for (i, row) in a.iter().enumerate() {
        let demand: f64 = row.iter().sum();
        let limit = transmitters[i] as f64 * channel_rate;
        if demand >= limit {
            out.push(Constraint::Source { i, demand, limit });
        }
    }
    out
}

/// Whether a node's traffic to itself counts in the uniform split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelfTraffic {
    /// Each node spreads its traffic over the other `nodes_total - 1` nodes.
    Excluded,
    /// Each node spreads its traffic over all `nodes_total` nodes, itself included.
    Included,
}

/// Traffic in bits/s from a cluster of `src` nodes to a cluster of `dst` nodes when
/// every node sends `per_node_rate` uniformly to the others. With `intra`, the two
/// clusters coincide.
pub fn cluster_traffic(
    nodes_total: u64,
    per_node_rate: f64,
    src: u64,
    dst: u64,
    intra: bool,
    self_traffic: SelfTraffic,
) -> f64 {
    let (peers, denom) = match self_traffic {
        SelfTraffic::Excluded => (
            if intra { src.saturating_sub(1) } else { dst },
            nodes_total.saturating_sub(1),
        ),
        SelfTraffic::Included => (if intra { src } else { dst }, nodes_total),
    };
    if denom == 0 {
        return 0.0;
    }
    src as f64 * per_node_rate * peers as f64 / denom as f64
}

/// Throughput of a lone backlogged flow served one quantum per grant: `C T_q / (T_q + guard)`.
pub fn peak_throughput(channel_rate: f64, quantum_bytes: u64, guard_ns: u64) -> f64 {
    let tq = 8.0 * quantum_bytes as f64 * 1e9 / channel_rate;
    channel_rate * tq / (tq + guard_ns as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeClass {
    Core,
    Regional,
    Metro,
    Edge,
    Gateway,
    Peering,
}

impl NodeClass {
    pub const ALL: [NodeClass; 6] = [
        NodeClass::Core,
        NodeClass::Regional,
        NodeClass::Metro,
        NodeClass::Edge,
        NodeClass::Gateway,
        NodeClass::Peering,
    ];

    pub fn key(self) -> &'static str {
        match self {
            NodeClass::Core => "core",
            NodeClass::Regional => "regional",
            NodeClass::Metro => "metro",
            NodeClass::Edge => "edge",
            NodeClass::Gateway => "gateway",
            NodeClass::Peering => "peering",
        }
    }

    /// Routers replaced by multipaths.
    pub fn is_transit(self) -> bool {
        matches!(
            self,
            NodeClass::Core | NodeClass::Regional | NodeClass::Metro
        )
    }
}

/// Router inventory and the extra consumption of the multipath architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyInventory {
    /// `(unit power in mW, count)` in [`NodeClass::ALL`] order.
    pub classes: [(u64, u64); 6],
    pub receiver_power_mw: u64,
    pub receiver_count: u64,
    pub controller_power_mw: u64,
    pub controller_count: u64,
    /// Gateway consumption increase, parts per million.
    pub gateway_uplift_ppm: u64,
    /// Published savings figure to print next to the computed one.
    pub reference_savings: Option<f64>,
}

const KW: u64 = 1_000_000;

impl EnergyInventory {
    /// The 420-edge-node ISP network: router table plus receiver and controller counts.
    pub fn isp_reference() -> Self {
        Self {
            classes: [
                (47 * KW, 8),
                (44 * KW, 14),
                (10 * KW, 70),
                (10 * KW, 420),
                (45 * KW, 8),
                (38 * KW, 4),
            ],
            receiver_power_mw: 17_500,
            receiver_count: 4200,
            controller_power_mw: 100_000,
            controller_count: 7,
            gateway_uplift_ppm: 150_000,
            reference_savings: Some(0.27),
        }
    }

    pub fn class(&self, c: NodeClass) -> (u64, u64) {
        self.classes[c as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    /// Per class total, mW, in [`NodeClass::ALL`] order.
    pub class_totals: [u64; 6],
    pub network_total: u64,
    pub transit_total: u64,
    pub receivers: u64,
    pub controllers: u64,
    pub gateway_uplift: u64,
    pub multipath_total: u64,
    pub savings: f64,
    pub reference_savings: Option<f64>,
}

pub fn energy_report(inv: &EnergyInventory) -> EnergyReport {
    let class_totals = inv.classes.map(|(unit, count)| unit * count);
    let network_total: u64 = class_totals.iter().sum();
    let transit_total: u64 = NodeClass::ALL
        .iter()
        .filter(|c| c.is_transit())
        .map(|&c| class_totals[c as usize])
        .sum();
    let receivers = inv.receiver_power_mw * inv.receiver_count;
    let controllers = inv.controller_power_mw * inv.controller_count;
    let gateway = class_totals[NodeClass::Gateway as usize];
    let gateway_uplift = (gateway as u128 * inv.gateway_uplift_ppm as u128 / 1_000_000) as u64;
    let multipath_total = network_total - transit_total + receivers + controllers + gateway_uplift;
    let savings = if network_total == 0 {
        0.0
    } else {
        1.0 - multipath_total as f64 / network_total as f64
    };
    EnergyReport {
        class_totals,
        network_total,
        transit_total,
        receivers,
        controllers,
        gateway_uplift,
        multipath_total,
        savings,
        reference_savings: inv.reference_savings,
    }
}

/// Formats milliwatts as kilowatts without rounding away any digit.
pub fn format_kw(mw: u64) -> String {
    let whole = mw / KW;
    let frac = mw % KW;
    if frac == 0 {
        return format!("{whole}");
    }
    let digits = format!("{frac:06}");
    format!("{whole}.{}", digits.trim_end_matches('0'))
}

impl EnergyReport {
    /// `(item, kW)` rows for tabular output.
    pub fn rows(&self) -> Vec<(String, String)> {
        let mut rows: Vec<(String, String)> = NodeClass::ALL
            .iter()
            .map(|&c| {
                (
                    c.key().to_string(),
                    format_kw(self.class_totals[c as usize]),
                )
            })
            .collect();
        for (name, v) in [
            ("network_total", self.network_total),
            ("transit_total", self.transit_total),
            ("receivers", self.receivers),
            ("controllers", self.controllers),
            ("gateway_uplift", self.gateway_uplift),
            ("multipath_total", self.multipath_total),
        ] {
            rows.push((name.to_string(), format_kw(v)));
        }
        rows
    }
}

impl fmt::Display for EnergyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, kw) in self.rows() {
            writeln!(f, "{name:<16} {kw:>10} kW")?;
        }
        write!(f, "savings          {:>10.2} %", self.savings * 100.0)?;
        if let Some(r) = self.reference_savings {
            write!(f, "  (reference figure {:.0} %)", r * 100.0)?;
        }
        Ok(())
    }
}

/// Optional traffic block of a planning file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficPlan {
    pub nodes_total: u64,
    pub per_node_rate: f64,
    pub src_cluster: u64,
    pub dst_cluster: u64,
    pub self_traffic: SelfTraffic,
    pub channel_rate: f64,
    pub quantum: u64,
    pub guard_time: u64,
}

impl TrafficPlan {
    pub fn inter(&self) -> f64 {
        cluster_traffic(
            self.nodes_total,
            self.per_node_rate,
            self.src_cluster,
            self.dst_cluster,
            false,
            self.self_traffic,
        )
    }

    pub fn intra(&self) -> f64 {
        cluster_traffic(
            self.nodes_total,
            self.per_node_rate,
            self.src_cluster,
            self.src_cluster,
            true,
            self.self_traffic,
        )
    }

    pub fn peak_throughput(&self) -> f64 {
        peak_throughput(self.channel_rate, self.quantum, self.guard_time)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanFile {
    pub inventory: EnergyInventory,
    pub traffic: Option<TrafficPlan>,
}

pub const PLAN_KEYS: &[&str] = &[
    "core_power",
    "core_count",
    "regional_power",
    "regional_count",
    "metro_power",
    "metro_count",
    "edge_power",
    "edge_count",
    "gateway_power",
    "gateway_count",
    "peering_power",
    "peering_count",
    "receiver_power",
    "receiver_count",
    "controller_power",
    "controller_count",
    "gateway_uplift",
    "reference_savings",
    "nodes_total",
    "per_node_rate",
    "src_cluster",
    "dst_cluster",
    "self_traffic",
    "channel_rate",
    "quantum",
    "guard_time",
];

/// Parses a decimal number of watts into exact milliwatts.
pub fn parse_milliwatts(s: &str) -> Result<u64, String> {
    parse_scaled(s, 3)
        .ok_or_else(|| format!("`{s}` is not a power in watts with at most 3 decimals"))
}

/// Parses a decimal fraction into exact parts per million.
pub fn parse_ppm(s: &str) -> Result<u64, String> {
    parse_scaled(s, 6).ok_or_else(|| format!("`{s}` is not a fraction with at most 6 decimals"))
}

fn parse_scaled(s: &str, decimals: u32) -> Option<u64> {
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if int.is_empty() && frac.is_empty() || frac.len() > decimals as usize {
        return None;
    }
    let all_digits = |x: &str| x.bytes().all(|b| b.is_ascii_digit());
    if !all_digits(int) || !all_digits(frac) {
        return None;
    }
    let int: u64 = if int.is_empty() { 0 } else { int.parse().ok()? };
    let frac_value: u64 = if frac.is_empty() {
        0
    } else {
        frac.parse().ok()?
    };
    let scale = 10u64.pow(decimals);
    int.checked_mul(scale)?
        .checked_add(frac_value * 10u64.pow(decimals - frac.len() as u32))
}

pub fn parse_plan(text: &str) -> Result<PlanFile, ScenarioError> {
    let kv = KeyValues::parse(text, PLAN_KEYS)?;
    let mut inv = EnergyInventory::isp_reference();
    for c in NodeClass::ALL {
        let slot = &mut inv.classes[c as usize];
        if let Some(p) = kv.get(&format!("{}_power", c.key()), parse_milliwatts)? {
            slot.0 = p;
        }
        if let Some(n) = kv.get(&format!("{}_count", c.key()), parse_u64)? {
            slot.1 = n;
        }
    }
    if let Some(v) = kv.get("receiver_power", parse_milliwatts)? {
        inv.receiver_power_mw = v;
    }
    if let Some(v) = kv.get("receiver_count", parse_u64)? {
        inv.receiver_count = v;
    }
    if let Some(v) = kv.get("controller_power", parse_milliwatts)? {
        inv.controller_power_mw = v;
    }
    if let Some(v) = kv.get("controller_count", parse_u64)? {
        inv.controller_count = v;
    }
    if let Some(v) = kv.get("gateway_uplift", parse_ppm)? {
        inv.gateway_uplift_ppm = v;
    }
    if let Some(v) = kv.get("reference_savings", parse_f64)? {
        inv.reference_savings = Some(v);
    }
    let traffic = match kv.get("nodes_total", parse_u64)? {
        None => None,
        Some(nodes_total) => {
            let src = kv
                .get("src_cluster", parse_u64)?
                .ok_or(ScenarioError::MissingKey("src_cluster"))?;
            Some(TrafficPlan {
                nodes_total,
                per_node_rate: kv
                    .get("per_node_rate", parse_f64)?
                    .ok_or(ScenarioError::MissingKey("per_node_rate"))?,
                src_cluster: src,
                dst_cluster: kv.get("dst_cluster", parse_u64)?.unwrap_or(src),
                self_traffic: kv
                    .get("self_traffic", parse_self_traffic)?
                    .unwrap_or(SelfTraffic::Excluded),
                channel_rate: kv.get("channel_rate", parse_f64)?.unwrap_or(10e9),
                quantum: kv.get("quantum", parse_u64)?.unwrap_or(1000),
                guard_time: kv.get("guard_time", parse_u64)?.unwrap_or(100),
            })
        }
    };
    Ok(PlanFile {
        inventory: inv,
        traffic,
    })
}

fn parse_self_traffic(s: &str) -> Result<SelfTraffic, String> {
    match s {
        "excluded" => Ok(SelfTraffic::Excluded),
        "included" => Ok(SelfTraffic::Included),
        other => Err(format!("expected `excluded` or `included`, got `{other}`")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn router_table_totals_are_exact() {
        let r = energy_report(&EnergyInventory::isp_reference());
        let kw: Vec<u64> = r.class_totals.iter().map(|mw| mw / KW).collect();
        assert_eq!(kw, vec![376, 616, 700, 4200, 360, 152]);
        assert!(r.class_totals.iter().all(|mw| mw % KW == 0));
        assert_eq!(r.network_total, 6404 * KW);
        assert_eq!(r.transit_total, 1692 * KW);
        assert_eq!(r.receivers, 73_500_000);
        assert_eq!(format_kw(r.receivers), "73.5");
    }

    #[test]
    fn multipath_total_and_savings() {
        let r = energy_report(&EnergyInventory::isp_reference());
        assert_eq!(r.controllers, 700_000);
        assert_eq!(r.gateway_uplift, 54 * KW);
        // 6404 - 1692 + 73.5 + 0.7 + 54
        assert_eq!(r.multipath_total, 4_840_200_000);
        assert!((r.savings - (1.0 - 4840.2 / 6404.0)).abs() < 1e-12);
        assert_eq!(r.reference_savings, Some(0.27));
    }

    #[test]
    fn report_text_lists_both_savings_figures() {
        let text = energy_report(&EnergyInventory::isp_reference()).to_string();
        assert!(text.contains("24.42 %"), "{text}");
        assert!(text.contains("reference figure 27 %"), "{text}");
        assert!(text.contains("receivers"));
    }

    #[test]
    fn kilowatt_formatting() {
        assert_eq!(format_kw(0), "0");
        assert_eq!(format_kw(1), "0.000001");
        assert_eq!(format_kw(4_840_200_000), "4840.2");
    }

    #[test]
    fn exact_decimal_parsing() {
        assert_eq!(parse_milliwatts("17.5"), Ok(17_500));
        assert_eq!(parse_milliwatts("47000"), Ok(47 * KW));
        assert_eq!(parse_ppm("0.15"), Ok(150_000));
        assert!(parse_milliwatts("1.2345").is_err());
        assert!(parse_milliwatts("-1").is_err());
        assert!(parse_milliwatts(".").is_err());
    }

    #[test]
    fn stability_conditions() {
        let c = 10e9;
        let a = vec![vec![1e9; 10]; 10];
        let v = stability_ok(&a, c, &[1; 10]);
        assert_eq!(v.len(), 20, "every column and row sits on the boundary");
        assert!(stability_ok(&vec![vec![0.0; 3]; 2], c, &[1, 1]).is_empty());
        let a = vec![vec![0.9e9; 10]; 10];
        assert!(stability_ok(&a, c, &[1; 10]).is_empty());
        // a source with two transmitters may carry more than C
        let a = vec![vec![6e9, 6e9], vec![0.0, 0.0]];
        assert_eq!(stability_ok(&a, c, &[2, 1]), vec![]);
        assert_eq!(stability_ok(&a, c, &[1, 1]).len(), 1);
    }

    #[test]
    fn cluster_traffic_examples() {
        let x = cluster_traffic(420, 1e9, 60, 60, false, SelfTraffic::Excluded);
        assert!((x - 60.0 * 60.0 / 419.0 * 1e9).abs() < 1.0);
        assert!((x / 1e9 - 8.59).abs() < 0.005);
        let x = cluster_traffic(400, 2e9, 40, 40, false, SelfTraffic::Excluded);
        assert!((x / 1e9 - 8.02).abs() < 0.005);
        let x = cluster_traffic(400, 2e9, 40, 40, false, SelfTraffic::Included);
        assert!((x - 8e9).abs() < 1e-3);
        assert_eq!(
            cluster_traffic(10, 1e9, 1, 1, true, SelfTraffic::Excluded),
            0.0
        );
        let intra = cluster_traffic(420, 1e9, 60, 60, true, SelfTraffic::Excluded);
        assert!(intra < cluster_traffic(420, 1e9, 60, 60, false, SelfTraffic::Excluded));
    }

    #[test]
    fn peak_throughput_bound() {
        let x = peak_throughput(10e9, 1000, 100);
        assert!((x - 8e10 / 9.0).abs() < 1.0);
        assert!((x / 1e9 - 8.89).abs() < 0.005);
        assert_eq!(peak_throughput(10e9, 1000, 0), 10e9);
        let big = peak_throughput(10e9, 1_000_000_000, 100);
        assert!(big > x && big < 10e9 && (10e9 - big) / 10e9 < 1e-6);
    }

    #[test]
    fn plan_file_overrides_and_traffic_block() {
        let p = parse_plan("controller_count = 9\nnodes_total = 400\nper_node_rate = 2e9\nsrc_cluster = 40\nself_traffic = included\n").unwrap();
        assert_eq!(p.inventory.controller_count, 9);
        assert_eq!(
            p.inventory.classes,
            EnergyInventory::isp_reference().classes
        );
        let t = p.traffic.unwrap();
        assert_eq!(t.dst_cluster, 40);
        assert!((t.inter() - 8e9).abs() < 1e-3);
        assert!(parse_plan("bogus = 1\n").is_err());
        assert!(matches!(
            parse_plan("nodes_total = 4\n"),
            Err(ScenarioError::MissingKey("src_cluster"))
        ));
    }
}
