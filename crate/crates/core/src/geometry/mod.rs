//! Meshes, the orbit camera and projection, and vertex visibility.

mod camera;
mod mesh;
mod obj;
mod visibility;

pub use camera::{
    camera_matrices, project, project_points, realize_camera, CameraBasis, CameraMatrices, CameraRaw, ProjectOp,
    Projected, DEFAULT_FOV_DEG,
};
pub use mesh::{face_normals, icosphere, Mesh};
pub use obj::{read_obj, save_obj, write_obj};
pub use visibility::visibility;
