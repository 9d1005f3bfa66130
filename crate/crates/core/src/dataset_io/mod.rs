//! Cohort generation and the on-disk formats: NIfTI-1 volumes and the CSV
//! manifest.

mod cohort;
mod evidence;
mod manifest;
mod nifti;

use std::io::Write;
use std::path::Path;

pub use cohort::{realize_subject, record_latent, record_seed, sample_dataset, IMAGE_DIR, MANIFEST_NAME};
pub use evidence::{evidence_csv, parse_evidence_csv, read_evidence_csv, write_evidence_csv};
pub use manifest::{
    read_manifest, scatter_csv, write_manifest, DatasetManifest, SubjectRecord, ValidationReport, COLUMNS,
    MANIFEST_FORMAT_VERSION,
};
pub use nifti::{read_volume, read_volume_on, write_volume};

use crate::error::{Error, Result};

/// NIfTI byte-level encoding, for callers that do their own I/O.
pub mod nifti_bytes {
    pub use super::nifti::{decode, encode, DT_FLOAT32, HEADER_SIZE, MAGIC, VOX_OFFSET};
}

/// Writes via a temporary sibling and rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_leaves_no_temporaries() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(write_atomic(&dir.path().join("missing/x"), b"").is_err());
    }
}
