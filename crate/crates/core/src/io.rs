//! File formats: observation CSV, model and driver-state JSON, truth sidecar.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::driver::{BlupResult, DriverState};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, Observation, StimulusRegistry, TrainedModel};
use crate::numerics::SymMatrix;
use crate::scalar::Real;
use crate::simgen::GroundTruth;

pub const CSV_HEADER: [&str; 4] = ["driver_id", "stimulus", "headway_s", "brt_s"];

#[derive(Debug, Serialize, Deserialize)]
#[serde(bound = "")]
struct ObservationRecord<T: Real> {
    driver_id: String,
    stimulus: String,
    headway_s: T,
    brt_s: T,
}

impl<T: Real> ObservationRecord<T> {
    fn from_observation(spec: &ModelSpec, o: &Observation<T>) -> Result<Self> {
        Ok(Self {
            driver_id: o.driver_id.clone(),
            stimulus: spec.stimuli().name(o.stimulus)?.to_string(),
            headway_s: o.headway_s,
            brt_s: o.brt_s,
        })
    }

    fn into_observation(self, registry: &StimulusRegistry) -> Result<Observation<T>> {
        let s = registry.id(&self.stimulus)?;
        Observation::new(self.driver_id, s, self.headway_s, self.brt_s)
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        csv::ErrorKind::Deserialize { err, .. } => Error::Csv { line, message: err.to_string() },
        other => Error::Csv { line, message: format!("{other:?}") },
    }
}

/// Parses observation CSV. Stimulus ids follow `registry` when given,
/// otherwise the order in which labels first appear.
pub fn read_observations<T: Real, R: Read>(
    reader: R,
    registry: Option<&StimulusRegistry>,
) -> Result<(StimulusRegistry, Vec<Observation<T>>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(csv_error)?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::Csv { line: 1, message: format!("expected header {}", CSV_HEADER.join(",")) });
    }
    let mut records = Vec::new();
    for row in rdr.deserialize::<ObservationRecord<T>>() {
        records.push(row.map_err(csv_error)?);
    }
    let registry = match registry {
        Some(r) => r.clone(),
        None => {
            let mut names: Vec<String> = Vec::new();
            for r in &records {
                if !names.contains(&r.stimulus) {
                    names.push(r.stimulus.clone());
                }
            }
            if names.is_empty() {
                return Err(Error::Csv { line: 1, message: "no observations".into() });
            }
            StimulusRegistry::new(names).map_err(|e| Error::Csv { line: 1, message: e.to_string() })?
        }
    };
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        let line = i as u64 + 2;
        out.push(r.into_observation(&registry).map_err(|e| Error::Csv { line, message: e.to_string() })?);
    }
    Ok((registry, out))
}

pub fn write_observations<T: Real, W: Write>(writer: W, spec: &ModelSpec, obs: &[Observation<T>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if obs.is_empty() {
        w.write_record(CSV_HEADER).map_err(csv_error)?;
    }
    for o in obs {
        w.serialize(ObservationRecord::from_observation(spec, o)?).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn to_json_bytes<S: Serialize>(value: &S) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn model_to_json<T: Real>(model: &TrainedModel<T>) -> Result<Vec<u8>> {
    to_json_bytes(model)
}

pub fn model_from_json<T: Real>(bytes: &[u8]) -> Result<TrainedModel<T>> {
    Ok(serde_json::from_slice(bytes)?)
}

pub fn load_model<T: Real>(path: &Path) -> Result<TrainedModel<T>> {
    model_from_json(&fs::read(path)?)
}

pub fn save_model<T: Real>(path: &Path, model: &TrainedModel<T>) -> Result<()> {
    atomic_write(path, &model_to_json(model)?)
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
struct CachedFile<T: Real> {
    gamma_hat: Vec<T>,
    gamma_hat_cov: SymMatrix<T>,
    pred_err_cov: SymMatrix<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
struct StateFile<T: Real> {
    driver_id: String,
    observations: Vec<ObservationRecord<T>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cached: Option<CachedFile<T>>,
}

pub fn state_to_json<T: Real>(state: &DriverState<T>, spec: &ModelSpec) -> Result<Vec<u8>> {
    let file = StateFile {
        driver_id: state.driver_id().to_string(),
        observations: state
            .observations()
            .iter()
            .map(|o| ObservationRecord::from_observation(spec, o))
            .collect::<Result<_>>()?,
        cached: state.cached().map(|c| CachedFile {
            gamma_hat: c.gamma_hat.iter().copied().collect(),
            gamma_hat_cov: c.gamma_hat_cov.clone(),
            pred_err_cov: c.pred_err_cov.clone(),
        }),
    };
    to_json_bytes(&file)
}

pub fn state_from_json<T: Real>(bytes: &[u8], spec: &ModelSpec) -> Result<DriverState<T>> {
    let file: StateFile<T> = serde_json::from_slice(bytes)?;
    let observations = file
        .observations
        .into_iter()
        .map(|r| r.into_observation(spec.stimuli()))
        .collect::<Result<Vec<_>>>()?;
    let p = spec.num_coefficients();
    let cached = match file.cached {
        Some(c) if c.gamma_hat.len() != p || c.gamma_hat_cov.dim() != p || c.pred_err_cov.dim() != p => {
            return Err(Error::DimensionMismatch(format!("cached BLUP does not have dimension {p}")));
        }
        Some(c) => Some(BlupResult {
            gamma_hat: nalgebra::DVector::from_vec(c.gamma_hat),
            gamma_hat_cov: c.gamma_hat_cov,
            pred_err_cov: c.pred_err_cov,
        }),
        None => None,
    };
    DriverState::from_parts(file.driver_id, observations, cached)
}

pub fn load_state<T: Real>(path: &Path, spec: &ModelSpec) -> Result<DriverState<T>> {
    state_from_json(&fs::read(path)?, spec)
}

pub fn save_state<T: Real>(path: &Path, state: &DriverState<T>, spec: &ModelSpec) -> Result<()> {
    atomic_write(path, &state_to_json(state, spec)?)
}

pub fn truth_to_json<T: Real>(truth: &GroundTruth<T>) -> Result<Vec<u8>> {
    to_json_bytes(truth)
}

/// `data.csv` → `data.truth.json`.
pub fn truth_path(csv_path: &Path) -> PathBuf {
    let stem = csv_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv_path.with_file_name(format!("{stem}.truth.json"))
}

/// Writes `bytes` to a sibling temp file, syncs it and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    atomic_write_with(path, bytes, || Ok(()))
}

/// [`atomic_write`] with a hook run between the temp write and the rename.
/// A hook error leaves `path` untouched and removes the temp file.
pub fn atomic_write_with<F>(path: &Path, bytes: &[u8], before_rename: F) -> Result<()>
where
    F: FnOnce() -> io::Result<()>,
{
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(io::Error::new(io::ErrorKind::InvalidInput, "path has no file name")))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        drop(f);
        before_rename()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::compute_blup;
    use crate::model::{FitInfo, StimulusId};
    use nalgebra::DVector;

    fn model() -> TrainedModel<f64> {
        TrainedModel::new(
            ModelSpec::default(),
            DVector::from_fn(9, |i, _| 0.01 * i as f64 - 0.3),
            0.04,
            SymMatrix::from_diagonal(&[0.02, 0.005, 0.0005, 0.02, 0.005, 0.0005, 0.02, 0.005, 0.0005]),
            SymMatrix::from_diagonal(&[1e-4; 9]),
            1.5,
            FitInfo { converged: true, loglik: -12.5, iterations: 100, seed: 42 },
        )
        .unwrap()
    }

    #[test]
    fn csv_round_trip() {
        let spec = ModelSpec::default();
        let obs = vec![
            Observation::new("a", StimulusId(1), 1.25, 0.8123456789).unwrap(),
            Observation::new("b", StimulusId(0), 0.1 + 0.2, 1.0 / 3.0).unwrap(),
        ];
        let mut buf = Vec::new();
        write_observations(&mut buf, &spec, &obs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("driver_id,stimulus,headway_s,brt_s\n"));
        let (_, back) = read_observations::<f64, _>(buf.as_slice(), Some(spec.stimuli())).unwrap();
        assert_eq!(back, obs);
    }

    #[test]
    fn registry_from_first_appearance() {
        let text = "driver_id,stimulus,headway_s,brt_s\na,y,1,1\na,x,1,1\nb,y,2,1\n";
        let (reg, obs) = read_observations::<f64, _>(text.as_bytes(), None).unwrap();
        assert_eq!(reg.names(), &["y".to_string(), "x".to_string()]);
        assert_eq!(obs[1].stimulus, StimulusId(1));
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let text = "driver_id,stimulus,headway_s,brt_s\na,x,1,1\na,x,oops,1\n";
        match read_observations::<f64, _>(text.as_bytes(), None) {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let text = "driver_id,stimulus,headway_s,brt_s\na,x,1,1\na,x,1,-1\n";
        match read_observations::<f64, _>(text.as_bytes(), None) {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let text = "id,stimulus,headway_s,brt_s\n";
        assert!(matches!(read_observations::<f64, _>(text.as_bytes(), None), Err(Error::Csv { line: 1, .. })));
    }

    #[test]
    fn model_json_is_byte_stable() {
        let bytes = model_to_json(&model()).unwrap();
        let again = model_to_json(&model_from_json::<f64>(&bytes).unwrap()).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn state_round_trip_with_cache() {
        let m = model();
        let mut s = DriverState::new("d1");
        s.add_observation(Observation::new("d1", StimulusId(2), 2.0, 0.9).unwrap()).unwrap();
        s.compute_blup(&m).unwrap();
        let bytes = state_to_json(&s, m.spec()).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("\"pedestrian_crossing\""));
        let back: DriverState<f64> = state_from_json(&bytes, m.spec()).unwrap();
        assert_eq!(back.observations(), s.observations());
        assert_eq!(back.cached(), s.cached());
        assert_eq!(back.cached().unwrap(), &compute_blup(s.observations(), &m).unwrap());
    }

    #[test]
    fn state_without_cache_omits_key() {
        let m = model();
        let s = DriverState::<f64>::new("d1");
        let text = String::from_utf8(state_to_json(&s, m.spec()).unwrap()).unwrap();
        assert!(!text.contains("cached"));
    }

    #[test]
    fn atomic_write_failure_keeps_old_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        atomic_write(&path, b"old").unwrap();
        let err = atomic_write_with(&path, b"new", || Err(io::Error::other("injected")));
        assert!(err.is_err());
        assert_eq!(fs::read(&path).unwrap(), b"old");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        atomic_write(&path, b"new").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"new");
    }

    #[test]
    fn truth_sidecar_name() {
        assert_eq!(truth_path(Path::new("/x/data.csv")), PathBuf::from("/x/data.truth.json"));
    }
}
