mod common;

#[test]
fn scenes_respect_bounds_and_archives_reproduce() {
    let dir = tempfile::tempdir().unwrap();
    println!("{}", common::render_bounds(1000, dir.path()).unwrap());
}
