use lazytensor::{HostData, MetricsSnapshot};
use serde::Serialize;
use serde_json::{Map, Value};

/// Result of running one workload in one mode. Serialized with the stable
/// keys `workload`, `mode`, `wall_ms`, `metrics`, `checksum`.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub workload: String,
    pub mode: String,
    pub wall_ms: f64,
    #[serde(serialize_with = "metrics_object")]
    pub metrics: MetricsSnapshot,
    /// 16 hex digits.
    pub checksum: String,
}

fn metrics_object<S: serde::Serializer>(m: &MetricsSnapshot, s: S) -> Result<S::Ok, S::Error> {
    metrics_json(m).serialize(s)
}

pub fn metrics_json(m: &MetricsSnapshot) -> Value {
    let map: Map<String, Value> = m.fields().iter().map(|(k, v)| (k.to_string(), Value::from(*v))).collect();
    Value::Object(map)
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("reports always serialize")
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} [{}] checksum={} wall_ms={:.2}\n", self.workload, self.mode, self.checksum, self.wall_ms);
        for (k, v) in self.metrics.fields() {
            out.push_str(&format!("  {k}: {v}\n"));
        }
        out
    }
}

/// Order-sensitive combination of per-tensor checksums.
pub fn checksum(values: &[HostData]) -> u64 {
    values.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, d| (h ^ d.checksum()).wrapping_mul(0x0000_0100_0000_01b3))
}

pub fn hex(sum: u64) -> String {
    format!("{sum:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_has_the_documented_keys() {
        let r = RunReport {
            workload: "fig1".into(),
            mode: "lazy".into(),
            wall_ms: 1.5,
            metrics: MetricsSnapshot { compile_count: 1, ..Default::default() },
            checksum: hex(42),
        };
        let v: Value = serde_json::from_str(&r.to_json()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 5);
        for k in ["workload", "mode", "wall_ms", "metrics", "checksum"] {
            assert!(keys.contains(&k), "{k}");
        }
        assert_eq!(v["metrics"]["compile_count"], 1);
        assert_eq!(v["metrics"].as_object().unwrap().len(), 7);
        assert_eq!(v["checksum"], "000000000000002a");
    }

    #[test]
    fn checksum_depends_on_order() {
        let a = HostData::F32(vec![1.0]);
        let b = HostData::F32(vec![2.0]);
        assert_ne!(checksum(&[a.clone(), b.clone()]), checksum(&[b, a]));
    }
}
