"""
Stockage des artefacts d'une exécution sur disque.

Les clés sont des chemins relatifs au répertoire d'exécution, les valeurs le
contenu binaire des fichiers. Le journal d'exécution est tenu sous `logs/`
par ajouts horodatés.
"""

import json
import shutil
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterator, Optional, Union

from geoadapt.core.base_store import BaseStore
from geoadapt.core.default.paths import LOGS_REL_PATH
from geoadapt.core.errors import DataError, ValidationError


class DiskStore(BaseStore):
    """
    Un stockage clé-valeur sur fichiers, où les clés sont les chemins relatifs
    des artefacts et les valeurs leur contenu.
    """

    def __init__(self, path: Union[str, Path]):
        """
        Args:
            path: Le répertoire d'exécution, créé s'il n'existe pas
        """
        self.path: Path = Path(path).absolute()
        self.path.mkdir(parents=True, exist_ok=True)

    def _resolve(self, key: Union[str, Path]) -> Path:
        if str(key).startswith("../") or Path(key).is_absolute():
            raise ValidationError(f"L'artefact {key} sort du répertoire d'exécution")
        return self.path / key

    def __contains__(self, key: object) -> bool:
        return isinstance(key, (str, Path)) and (self.path / key).is_file()

    def __getitem__(self, key: Union[str, Path]) -> bytes:
        """
        Raises:
            KeyError: Si l'artefact n'existe pas
        """
        full_path = self._resolve(key)
        if not full_path.is_file():
            raise KeyError(f"L'artefact '{key}' n'a pu être trouvé dans '{self.path}'")
        return full_path.read_bytes()

    def get(self, key: Union[str, Path], default: Optional[Any] = None) -> Any:
        try:
            return self[key]
        except KeyError:
            return default

    def __setitem__(self, key: Union[str, Path], val: Union[bytes, str]) -> None:
        """
        Écrit ou remplace un artefact.

        Raises:
            ValidationError: Si la clé sort du répertoire d'exécution
            TypeError: Si la valeur n'est ni bytes ni str
        """
        if isinstance(val, str):
            val = val.encode("utf-8")
        if not isinstance(val, (bytes, bytearray)):
            raise TypeError("val doit être bytes ou str")
        full_path = self._resolve(key)
        full_path.parent.mkdir(parents=True, exist_ok=True)
        full_path.write_bytes(bytes(val))

    def __delitem__(self, key: Union[str, Path]) -> None:
        item_path = self._resolve(key)
        if not item_path.exists():
            raise KeyError(f"L'élément '{key}' n'a pu être trouvé dans '{self.path}'")
        if item_path.is_file():
            item_path.unlink()
        else:
            shutil.rmtree(item_path)

    def __iter__(self) -> Iterator[str]:
        return iter(
            sorted(
                item.relative_to(self.path).as_posix()
                for item in self.path.rglob("*")
                if item.is_file()
            )
        )

    def __len__(self) -> int:
        return sum(1 for _ in self)

    def file(self, key: Union[str, Path]) -> Path:
        """Chemin absolu d'un artefact, pour les écrivains qui prennent un chemin."""
        full_path = self._resolve(key)
        full_path.parent.mkdir(parents=True, exist_ok=True)
        return full_path

    def require(self, key: Union[str, Path]) -> Path:
        """
        Chemin d'un artefact qui doit exister.

        Raises:
            DataError: Si l'artefact est absent
        """
        full_path = self._resolve(key)
        if not full_path.is_file():
            raise DataError(f"Artefact introuvable : {full_path}")
        return full_path

    def to_dict(self) -> Dict[str, int]:
        """Taille en octets de chaque artefact."""
        return {key: (self.path / key).stat().st_size for key in self}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2)

    def log(self, key: Union[str, Path], val: str) -> None:
        """
        Ajoute une entrée horodatée à un fichier de journal, créé au besoin.

        Args:
            key: Le nom du fichier sous `logs/`
            val: Le texte à ajouter
        """
        if str(key).startswith("../"):
            raise ValidationError(f"Le nom de fichier {key} a tenté d'accéder au chemin parent.")
        if not isinstance(val, str):
            raise TypeError("val doit être str")

        full_path = self.path / LOGS_REL_PATH / key
        full_path.parent.mkdir(parents=True, exist_ok=True)
        with open(full_path, "a", encoding="utf-8") as file:
            file.write(f"\n{datetime.now().isoformat()}\n")
            file.write(val + "\n")

    def archive_logs(self) -> Optional[Path]:
        """
        Déplace les journaux existants vers un répertoire horodaté.

        Returns:
            Le répertoire d'archive, ou None s'il n'y avait rien à archiver
        """
        logs = self.path / LOGS_REL_PATH
        if not logs.is_dir():
            return None
        archive_dir = self.path / f"{LOGS_REL_PATH}_{datetime.now().strftime('%Y-%m-%d-%H-%M-%S-%f')}"
        shutil.move(str(logs), str(archive_dir))
        return archive_dir
