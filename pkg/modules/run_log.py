import json
import logging
from datetime import datetime

import pandas as pd

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1


class RunLog:
    """In-memory ledger of pipeline events for one command invocation"""

    def __init__(self, command, clock=None):
        self.command = command
        self.entries = []
        self._clock = clock or datetime.now
        self.started = self._clock()

    def log_action(self, action, details=""):
        """Record a pipeline step"""
        entry = {
            'timestamp': self._clock().strftime("%Y-%m-%d %H:%M:%S"),
            'command': self.command,
            'action': action,
            'details': details,
        }
        self.entries.append(entry)
        logger.info("%s: %s %s", self.command, action, details)
        return entry

    def log_output(self, kind, path, rows=None):
        """Record a written artifact"""
        details = f"Path: {path}" if rows is None else f"Path: {path}, Rows: {rows}"
        return self.log_action(f"Output: {kind}", details)

    def log_error(self, error_type, error_message):
        """Record a failure before the command exits"""
        logger.error("%s: %s: %s", self.command, error_type, error_message)
        return self.log_action(f"Error: {error_type}", error_message)

    def get_summary(self):
        """Counts by action kind"""
        if not self.entries:
            return {'command': self.command, 'total_events': 0, 'event_types': {}, 'errors': 0}

        df = pd.DataFrame(self.entries)
        kinds = df['action'].str.split(':').str[0]
        return {
            'command': self.command,
            'total_events': len(self.entries),
            'event_types': {str(k): int(v) for k, v in kinds.value_counts().items()},
            'errors': int((kinds == 'Error').sum()),
        }

    def export_csv(self, filename):
        """Write the ledger as CSV; returns the path, or None when empty"""
        if not self.entries:
            return None
        pd.DataFrame(self.entries).to_csv(filename, index=False)
        return filename

    def write_manifest(self, filename, **sections):
        """JSON manifest: command, start time, caller-supplied sections, events"""
        manifest = {
            'manifest_version': MANIFEST_VERSION,
            'command': self.command,
            'started': self.started.strftime("%Y-%m-%d %H:%M:%S"),
            **sections,
            'events': self.entries,
        }
        with open(filename, 'w', encoding='utf-8') as f:
            json.dump(manifest, f, indent=2)
        return filename
