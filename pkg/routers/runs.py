import logging
from pathlib import Path
from typing import List

import aiofiles
from fastapi import APIRouter, HTTPException, status

import storage
from config import settings
from errors import ConfigError
from schemas import MetricsResponse
from trainer import MANIFEST_FILE, METRICS_FILE, TIMINGS_FILE, parse_metrics_lines

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/api/runs", tags=["Ejecuciones"])


def run_path(name: str) -> Path:
    root = Path(settings.output_root)
    path = root / name
    # names come from the URL; keep them inside the output root
    if path.resolve().parent != root.resolve() or not (path / MANIFEST_FILE).is_file():
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail=f"Ejecución no encontrada: {name}"
        )
    return path


async def read_lines(path: Path) -> List[str]:
    if not path.is_file():
        return []
    async with aiofiles.open(path, "r") as f:
        content = await f.read()
    return content.splitlines()


@router.get(
    "",
    summary="Listar ejecuciones",
    description="Lista las ejecuciones guardadas bajo EVP_OUTPUT_ROOT junto con su manifiesto."
)
async def list_runs():
    root = Path(settings.output_root)
    if not root.is_dir():
        return {"message": "Sin ejecuciones", "data": []}

    runs = []
    for manifest in sorted(root.glob(f"*/{MANIFEST_FILE}")):
        try:
            payload = storage.read_json(manifest)
        except (ConfigError, ValueError) as e:
            logger.warning("Skipping unreadable manifest %s: %s", manifest, e)
            continue
        runs.append({
            "name": manifest.parent.name,
            "prompt_parameters": payload.get("prompt_parameters"),
            "best_epoch": payload.get("best_epoch"),
            "epochs_completed": payload.get("epochs_completed"),
            "backbone_checksum": payload.get("backbone_checksum"),
        })
    return {"message": f"{len(runs)} ejecuciones", "data": runs}


@router.get(
    "/{name}/metrics",
    response_model=MetricsResponse,
    summary="Métricas de una ejecución",
    description="Devuelve los registros de metrics.jsonl con el tiempo de pared de timings.jsonl.",
    responses={404: {"description": "Ejecución no encontrada"}}
)
async def run_metrics(name: str):
    path = run_path(name)
    try:
        records = parse_metrics_lines(
            await read_lines(path / METRICS_FILE),
            await read_lines(path / TIMINGS_FILE)
        )
    except (ValueError, KeyError) as e:
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail=f"Métricas ilegibles: {e}"
        )
    return MetricsResponse(message=f"{len(records)} registros", data=records)
