import modal

image = (
    modal.Image.debian_slim(python_version="3.13")
    .uv_pip_install(
        "numpy",
        "scipy",
        "pandas",
        "pydantic",
        "cuid2",
        "tqdm",
    )
    .add_local_python_source("src")
)

app = modal.App(
    name="dynamic-cloud-ct-sweeps",
    image=image,
)
