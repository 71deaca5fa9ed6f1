//! On-disk formats shared by the pipeline, the simulator and the external
//! densifier protocol.

mod depth;
mod stream;

use thiserror::Error;

pub use depth::{read_camera, read_fdepth, read_sdepth, write_camera, write_fdepth, write_sdepth, SparseDepth};
pub use stream::{
    marker_error_records, read_csv, read_dsm, read_frames, read_report, read_tracks, write_csv, write_dsm_header, write_frames,
    write_ply, write_report, write_tracks, Diagnostic, FrameRecord, MarkerErrorRecord, MarkerPairRecord, MarkerRecord,
};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    /// `line` is 1-based; 0 means the problem is not tied to a single line.
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
}

impl IoError {
    pub fn format(line: usize, message: impl Into<String>) -> Self {
        Self::Format { line, message: message.into() }
    }
}

/// Binary PPM (P6).
pub fn write_ppm<W: std::io::Write>(w: W, img: &image::RgbImage) -> Result<(), IoError> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::ImageEncoder;
    PnmEncoder::new(w)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| IoError::format(0, e.to_string()))
}

pub fn read_ppm<R: std::io::BufRead + std::io::Seek>(r: R) -> Result<image::RgbImage, IoError> {
    let img = image::ImageReader::with_format(r, image::ImageFormat::Pnm).decode().map_err(|e| IoError::format(0, e.to_string()))?;
    Ok(img.into_rgb8())
}
