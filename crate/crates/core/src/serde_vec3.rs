//! Serialize `Vector3<f64>` as a plain `[x, y, z]` array.

use nalgebra::Vector3;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub fn serialize<S: Serializer>(v: &Vector3<f64>, s: S) -> Result<S::Ok, S::Error> {
    [v.x, v.y, v.z].serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector3<f64>, D::Error> {
    let a = <[f64; 3]>::deserialize(d)?;
    Ok(Vector3::from(a))
}

pub mod option {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<Vector3<f64>>, s: S) -> Result<S::Ok, S::Error> {
        v.map(|v| [v.x, v.y, v.z]).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vector3<f64>>, D::Error> {
        Ok(Option::<[f64; 3]>::deserialize(d)?.map(Vector3::from))
    }
}
