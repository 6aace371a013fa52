use serde::{Deserialize, Serialize};

use super::schema::ProtocolSpec;
use super::Frame;

/// A (field, value class) pair, the unit of seed coverage.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Combo {
    pub field: String,
    pub class: String,
}

/// Every combo in declaration order, classes in declared order.
pub fn enumerate_combos(spec: &ProtocolSpec) -> Vec<Combo> {
    spec.fields
        .iter()
        .flat_map(|f| {
            f.value_classes.iter().map(move |c| Combo { field: f.name.clone(), class: c.name.clone() })
        })
        .collect()
}

pub fn combo_of(spec: &ProtocolSpec, field: &str, key: u64) -> Option<Combo> {
    let fd = spec.field(field)?;
    fd.class_of(key).map(|c| Combo { field: field.to_string(), class: c.to_string() })
}

/// Combos a frame's values fall into. Values outside every class are skipped.
pub fn combos_of_frame(spec: &ProtocolSpec, frame: &Frame) -> Vec<Combo> {
    frame
        .values
        .iter()
        .filter(|(name, _)| !frame.deleted.contains(*name))
        .filter_map(|(name, v)| combo_of(spec, name, v.class_key()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::parse_spec;

    #[test]
    fn counts_two_by_three() {
        let spec = parse_spec(
            "protocol p\nport 1\nfield a u8 range 0..9\nfield b u8 range 0..9\n\
             class a lo 0..4\nclass a hi 5..9\nclass b x 0..2\nclass b y 3..5\nclass b z 6..9\n\
             segment r : a b",
        )
        .unwrap();
        let combos = enumerate_combos(&spec);
        assert_eq!(combos.len(), 5);
        assert_eq!(combos[2], Combo { field: "b".into(), class: "x".into() });
    }

    #[test]
    fn single_opaque_class() {
        let spec = parse_spec("protocol p\nport 1\nfield body bytes opaque\nsegment r : body").unwrap();
        assert_eq!(enumerate_combos(&spec).len(), 1);
    }
}
