//! File helpers shared by the corpus, checkpoint and report writers.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::preprocess::{FrameSequence, RgbImage};

/// Writes `bytes` to a sibling temp file and renames it over `path`, so a
/// crash never leaves a truncated file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(format!("writing {}", path.display()), e));
    }
    Ok(())
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.png")
}

/// Reads a clip stored as a directory of numbered image files, in
/// lexicographic file-name order.
pub fn read_frame_dir(dir: &Path, fps: f64) -> Result<FrameSequence> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Input(format!("no frames in {}", dir.display())));
    }
    let mut frames = Vec::with_capacity(paths.len());
    for (i, p) in paths.iter().enumerate() {
        let img = image::open(p)
            .map_err(|source| Error::Image {
                path: p.clone(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let frame = RgbImage::from_raw(w as usize, h as usize, img.into_raw())
            .ok_or_else(|| Error::Input(format!("frame {i} in {}: bad buffer", dir.display())))?;
        frames.push(frame);
    }
    FrameSequence::new(frames, fps)
}

pub fn write_frame_dir(dir: &Path, frames: &FrameSequence) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    for (i, f) in frames.frames().iter().enumerate() {
        let path = dir.join(frame_file_name(i));
        let buf = image::RgbImage::from_raw(f.width() as u32, f.height() as u32, f.data().to_vec())
            .expect("frame buffer matches its dimensions");
        buf.save(&path).map_err(|source| Error::Image { path, source })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn frame_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<_> = (0..3u8)
            .map(|k| RgbImage::from_raw(4, 2, (0..24).map(|v| v * 3 + k).collect()).unwrap())
            .collect();
        let seq = FrameSequence::new(frames, 30.0).unwrap();
        write_frame_dir(dir.path(), &seq).unwrap();
        let back = read_frame_dir(dir.path(), 30.0).unwrap();
        assert_eq!(back.frames(), seq.frames());
    }
}
