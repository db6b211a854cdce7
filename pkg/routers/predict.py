import io

import torch
from fastapi import APIRouter, File, HTTPException, Request, UploadFile, status
from PIL import Image, UnidentifiedImageError
from torchvision import transforms

from config import settings
from errors import EVPError
from schemas import PredictionResponse, PromptInfoResponse, TokenPromptMode
from trainer import PromptedClassifier

router = APIRouter(prefix="/api/predict", tags=["Predicción"])


def get_classifier(request: Request) -> PromptedClassifier:
    classifier = getattr(request.app.state, "classifier", None)
    if classifier is None:
        raise HTTPException(
            status_code=status.HTTP_503_SERVICE_UNAVAILABLE,
            detail="No hay checkpoint cargado (define EVP_SERVE_CHECKPOINT)"
        )
    return classifier


def decode_image(content: bytes, size: int) -> torch.Tensor:
    """Uploaded bytes -> raw [0, 1] tensor `(1, 3, size, size)`."""
    try:
        image = Image.open(io.BytesIO(content)).convert("RGB")
    except (UnidentifiedImageError, OSError):
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail="El archivo no es una imagen válida"
        )
    to_tensor = transforms.Compose([transforms.Resize((size, size)), transforms.ToTensor()])
    return to_tensor(image).unsqueeze(0)


@router.post(
    "",
    response_model=PredictionResponse,
    summary="Clasificar imagen",
    description="Clasifica una imagen con el modelo congelado y el prompt aprendido del checkpoint cargado.",
    responses={
        200: {"description": "Clase predicha y probabilidades"},
        400: {"description": "Archivo inválido o demasiado grande"},
        503: {"description": "No hay modelo cargado"}
    }
)
async def predict(request: Request, file: UploadFile = File(...)):
    classifier = get_classifier(request)
    if not file or not file.filename:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail="Invalid file: no filename provided"
        )

    content = await file.read()
    if len(content) > settings.max_upload_size:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail=f"File too large. Maximum size: {settings.max_upload_size} bytes"
        )

    image = decode_image(content, classifier.native_size)
    try:
        probabilities = classifier.probabilities(image)[0]
    except EVPError as e:
        raise HTTPException(status_code=e.status_code, detail=str(e))

    return PredictionResponse(
        label=int(probabilities.argmax()),
        probabilities=[float(p) for p in probabilities]
    )


@router.get(
    "/prompt",
    response_model=PromptInfoResponse,
    summary="Información del prompt",
    description="Geometría del prompt de píxeles, modo de tokens y número de parámetros aprendidos."
)
async def prompt_info(request: Request):
    classifier = get_classifier(request)
    geometry = classifier.prompt.geometry.model_dump(mode="json") if classifier.prompt is not None else None
    token_mode = classifier.token_prompts.mode.value if classifier.token_prompts is not None else TokenPromptMode.NONE.value
    return PromptInfoResponse(
        geometry=geometry,
        token_mode=token_mode,
        prompt_parameters=classifier.prompt_parameters()
    )
