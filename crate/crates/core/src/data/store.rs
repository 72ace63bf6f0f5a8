//! On-disk layout for generated scenarios.
//!
//! One columnar binary file per worker table under `net<e>/worker<k>.bin`,
//! plus a `manifest.json` tying the set together with the generating
//! config. Table files carry a structured-text header (feature names,
//! units, clock, seed) followed by the raw samples as little-endian f64,
//! row-major — byte-identical for identical scenarios. A CSV export exists
//! for eyeballing tables in ordinary tools.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Scenario, ScenarioConfig, TimeSeriesTable};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::topology::{NetId, WorkerId};

const TABLE_MAGIC: &[u8; 4] = b"SQTB";
const TABLE_VERSION: u32 = 1;
const MANIFEST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TableHeader {
    net: u32,
    worker: u32,
    feature_names: Vec<String>,
    units: Vec<String>,
    logging_period_ms: u32,
    seed: u64,
    n_samples: usize,
    n_features: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    config: ScenarioConfig,
    tables: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    net: u32,
    worker: u32,
    path: String,
    n_samples: usize,
    features: Vec<String>,
}

/// Serialize one table to its binary form.
pub fn table_to_bytes(table: &TimeSeriesTable) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&TableHeader {
        net: table.net.0,
        worker: table.worker.0,
        feature_names: table.feature_names.clone(),
        units: table.units.clone(),
        logging_period_ms: table.logging_period_ms,
        seed: table.seed,
        n_samples: table.n_samples(),
        n_features: table.n_features(),
    })
    .map_err(|e| Error::Codec(format!("table header: {e}")))?;
    let mut out = Vec::with_capacity(16 + header.len() + table.values.len() * 8);
    out.extend_from_slice(TABLE_MAGIC);
    out.extend_from_slice(&TABLE_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in table.values.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parse a table from its binary form.
pub fn table_from_bytes(bytes: &[u8]) -> Result<TimeSeriesTable> {
    let mut cursor = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cursor
        .read_exact(&mut magic)
        .map_err(|_| Error::Codec("table file truncated before magic".into()))?;
    if &magic != TABLE_MAGIC {
        return Err(Error::Codec(format!(
            "not a table file (magic {magic:02x?})"
        )));
    }
    let version = read_u32(&mut cursor)?;
    if version != TABLE_VERSION {
        return Err(Error::Codec(format!(
            "unsupported table version {version} (expected {TABLE_VERSION})"
        )));
    }
    let header_len = read_u32(&mut cursor)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    cursor
        .read_exact(&mut header_bytes)
        .map_err(|_| Error::Codec("table file truncated inside header".into()))?;
    let header: TableHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Codec(format!("table header: {e}")))?;

    let count = header.n_samples * header.n_features;
    let mut data = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        cursor
            .read_exact(&mut buf)
            .map_err(|_| Error::Codec("table file truncated inside samples".into()))?;
        data.push(f64::from_le_bytes(buf));
    }
    if cursor.position() != bytes.len() as u64 {
        return Err(Error::Codec("trailing bytes after table samples".into()));
    }
    Ok(TimeSeriesTable {
        net: NetId(header.net),
        worker: WorkerId(header.worker),
        feature_names: header.feature_names,
        units: header.units,
        logging_period_ms: header.logging_period_ms,
        seed: header.seed,
        values: Tensor::from_vec(&[header.n_samples, header.n_features], data)?,
    })
}

fn read_u32(cursor: &mut std::io::Cursor<&[u8]>) -> Result<u32> {
    let mut buf = [0u8; 4];
    cursor
        .read_exact(&mut buf)
        .map_err(|_| Error::Codec("table file truncated".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn table_rel_path(net: NetId, worker: WorkerId) -> String {
    format!("net{}/worker{}.bin", net.0, worker.0)
}

/// Write every table plus the manifest under `dir`.
pub fn save_scenario(dir: &Path, scenario: &Scenario) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (&(net, worker), table) in &scenario.tables {
        let rel = table_rel_path(net, worker);
        let path = dir.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut file = fs::File::create(&path)?;
        file.write_all(&table_to_bytes(table)?)?;
        entries.push(ManifestEntry {
            net: net.0,
            worker: worker.0,
            path: rel,
            n_samples: table.n_samples(),
            features: table.feature_names.clone(),
        });
    }
    let manifest = Manifest {
        schema_version: MANIFEST_VERSION,
        config: scenario.config.clone(),
        tables: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::Codec(format!("manifest: {e}")))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Load a scenario previously written by [`save_scenario`].
pub fn load_scenario(dir: &Path) -> Result<Scenario> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)
        .map_err(|e| Error::Codec(format!("manifest {}: {e}", manifest_path.display())))?;
    if manifest.schema_version != MANIFEST_VERSION {
        return Err(Error::Codec(format!(
            "unsupported manifest version {} (expected {MANIFEST_VERSION})",
            manifest.schema_version
        )));
    }
    let mut tables = std::collections::BTreeMap::new();
    for entry in &manifest.tables {
        let table = table_from_bytes(&fs::read(dir.join(&entry.path))?)?;
        let key = (NetId(entry.net), WorkerId(entry.worker));
        if (table.net, table.worker) != key {
            return Err(Error::Codec(format!(
                "{} claims {}/{} but holds {}/{}",
                entry.path, key.0, key.1, table.net, table.worker
            )));
        }
        if table.n_samples() != entry.n_samples {
            return Err(Error::Codec(format!(
                "{} length {} disagrees with the manifest's {}",
                entry.path,
                table.n_samples(),
                entry.n_samples
            )));
        }
        tables.insert(key, table);
    }
    Ok(Scenario {
        config: manifest.config,
        tables,
    })
}

/// Render one table as CSV with a leading time column, for inspection.
pub fn table_to_csv(table: &TimeSeriesTable) -> String {
    let mut out = String::from("time_ms");
    for name in &table.feature_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for r in 0..table.n_samples() {
        out.push_str(&(r as u64 * u64::from(table.logging_period_ms)).to_string());
        for c in 0..table.n_features() {
            out.push(',');
            out.push_str(&format!("{}", table.values.get(r, c)));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scenario, ScenarioConfig};

    fn small_scenario() -> Scenario {
        generate_scenario(&ScenarioConfig {
            duration_s: 10,
            seed: 3,
            ..ScenarioConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn scenario_round_trips_through_disk() {
        let scenario = small_scenario();
        let dir = tempfile::tempdir().unwrap();
        save_scenario(dir.path(), &scenario).unwrap();
        let reloaded = load_scenario(dir.path()).unwrap();
        assert_eq!(scenario, reloaded);
    }

    #[test]
    fn identical_scenarios_serialize_to_identical_bytes() {
        let (a, b) = (small_scenario(), small_scenario());
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        save_scenario(da.path(), &a).unwrap();
        save_scenario(db.path(), &b).unwrap();
        for entry in ["manifest.json", "net1/worker1.bin", "net2/worker1.bin", "net3/worker1.bin"]
        {
            let fa = fs::read(da.path().join(entry)).unwrap();
            let fb = fs::read(db.path().join(entry)).unwrap();
            assert_eq!(fa, fb, "{entry} differs between identical runs");
        }
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let scenario = small_scenario();
        let table = scenario.tables.values().next().unwrap();
        let mut bytes = table_to_bytes(table).unwrap();
        bytes[0] ^= 0xff;
        assert!(table_from_bytes(&bytes).is_err());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let scenario = small_scenario();
        let table = scenario.tables.values().next().unwrap();
        let bytes = table_to_bytes(table).unwrap();
        assert!(table_from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn csv_export_has_one_line_per_sample_plus_header() {
        let scenario = small_scenario();
        let table = scenario.groundtruth_table().unwrap();
        let csv = table_to_csv(table);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), table.n_samples() + 1);
        assert_eq!(
            lines[0],
            "time_ms,load_resource_blocks,attached_ue_count,uplink_sinr,uplink_throughput"
        );
        assert!(lines[1].starts_with("0,"));
        assert!(lines[2].starts_with("200,"));
    }
}
