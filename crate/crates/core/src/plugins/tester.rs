//! Synthetic load plugin: every sensor counts 1, 2, 3, ... per read.
//! Deterministic output makes end-to-end loss checks exact.

use super::{group_common, GroupSpec, Plugin, PluginError, Sample};
use crate::proptree::PtNode;

pub struct Tester {
    groups: Vec<GroupSpec>,
    /// One counter per sensor per group, starting at zero; a read returns
    /// the incremented value, so the first reading is 1.
    counters: Vec<Vec<i64>>,
}

impl Tester {
    pub fn from_config(config: &PtNode) -> Result<Tester, PluginError> {
        let mut groups = Vec::new();
        for g in config.children_named("group") {
            let (name, interval_ns, unit, scale) = group_common(g)?;
            let count = g
                .get_u64_or("sensors", 1)
                .map_err(|e| PluginError::BadConfig(e.to_string()))?;
            if count == 0 {
                return Err(PluginError::BadConfig(format!("group {name}: needs at least one sensor")));
            }
            let sensors = (0..count).map(|i| format!("s{i}")).collect();
            groups.push(GroupSpec { name, interval_ns, unit, scale, sensors });
        }
        if groups.is_empty() {
            return Err(PluginError::BadConfig("tester needs at least one group".into()));
        }
        let counters = groups.iter().map(|g| vec![0; g.sensors.len()]).collect();
        Ok(Tester { groups, counters })
    }
}

impl Plugin for Tester {
    fn kind(&self) -> &'static str {
        "tester"
    }

    fn groups(&self) -> &[GroupSpec] {
        &self.groups
    }

    fn read_group(&mut self, idx: usize) -> Vec<Sample> {
        let group = &self.groups[idx];
        let counters = &mut self.counters[idx];
        group
            .sensors
            .iter()
            .zip(counters.iter_mut())
            .map(|(name, counter)| {
                *counter += 1;
                (name.clone(), Ok(*counter))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proptree;

    fn build(cfg: &str) -> Tester {
        let root = proptree::parse(cfg).unwrap();
        Tester::from_config(&root).unwrap()
    }

    #[test]
    fn counts_from_one_independently_per_sensor() {
        let mut t = build("group g1 {\n    interval 1000\n    sensors 3\n}\n");
        assert_eq!(t.groups().len(), 1);
        assert_eq!(t.groups()[0].sensors, vec!["s0", "s1", "s2"]);
        let first = t.read_group(0);
        assert!(first.iter().all(|(_, v)| v == &Ok(1)));
        let second = t.read_group(0);
        assert!(second.iter().all(|(_, v)| v == &Ok(2)));
        assert_eq!(second[1].0, "s1");
    }

    #[test]
    fn groups_count_separately() {
        let mut t = build("group a {\n sensors 1\n}\ngroup b {\n sensors 1\n}\n");
        t.read_group(0);
        t.read_group(0);
        assert_eq!(t.read_group(1)[0].1, Ok(1));
        assert_eq!(t.read_group(0)[0].1, Ok(3));
    }

    #[test]
    fn config_validation() {
        let root = proptree::parse("group g {\n sensors 0\n}\n").unwrap();
        assert!(Tester::from_config(&root).is_err());
        let root = proptree::parse("").unwrap();
        assert!(Tester::from_config(&root).is_err());
    }
}
